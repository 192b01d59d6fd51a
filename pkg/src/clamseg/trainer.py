"""Twin-model contrastive training loop.

Two UNet++ instances with identical seeded initialization train on slice
pairs: positive pairs (augmented twins, normal-normal) pull the models'
probability maps together, cross-label pairs push them apart via swapped
targets, each pair weighted by its eta.  One optimizer tick per step updates
both models' parameters independently.  Everything downstream of the master
seed (init, pair draws, data order) is counter-derived, so runs replay
bit-exactly and checkpoints can resume mid-stream.

model_a is the canonical inference model; after training, the marker output
channel is calibrated from image-level labels alone (mean activation over
positive- vs negative-labeled training images).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import augment, checkpoint, losses
from . import tensor as T
from .errors import DataError, NonFiniteLossError, NumericError
from .seeding import derive_key
from .unetpp import UnetPP, UnetPPConfig


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"optimizer kind must be sgd or adam, got {self.kind!r}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        for nm in ("beta1", "beta2"):
            b = getattr(self, nm)
            if not 0.0 < b < 1.0:
                raise ValueError(f"{nm} must be in (0, 1), got {b}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


class Optimizer:
    """sgd (w <- w - lr g) or bias-corrected adam over a flat name->Tensor map."""

    def __init__(self, config, params):
        config.validate()
        self.config = config
        self.params = params
        self.t = 0
        if config.kind == "adam":
            self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
            self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        else:
            self.m = self.v = None

    def step(self, grads):
        """One tick; updates every parameter in sorted-name order."""
        if set(grads) != set(self.params):
            raise ValueError("gradient keys do not match parameter keys")
        cfg = self.config
        self.t += 1
        for name in sorted(self.params):
            w = self.params[name]
            g = np.asarray(grads[name])
            if g.shape != w.data.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape "
                                 f"{w.data.shape} for {name}")
            if cfg.kind == "sgd":
                w.data = w.data - cfg.lr * g
            else:
                m = self.m[name] = cfg.beta1 * self.m[name] + (1 - cfg.beta1) * g
                v = self.v[name] = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * g * g
                mhat = m / (1 - cfg.beta1 ** self.t)
                vhat = v / (1 - cfg.beta2 ** self.t)
                w.data = w.data - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)


@dataclass
class TrainState:
    model_a: UnetPP
    model_b: UnetPP
    optimizer: Optimizer
    model_config: UnetPPConfig
    opt_config: OptimizerConfig
    policy: augment.PairPolicy
    seed: int
    step: int = 0
    siamese: bool = False
    marker_channel: int = 1

    def models(self):
        if self.siamese:
            return [("a", self.model_a)]
        return [("a", self.model_a), ("b", self.model_b)]


def init_state(model_config, opt_config, policy, seed, siamese=False,
               truncated=False):
    if model_config.input_size != policy.tile_size:
        raise ValueError(f"model input size {model_config.input_size} must equal "
                         f"the pair tile size {policy.tile_size}")
    init_seed = derive_key(seed, "init")
    model_a = UnetPP(model_config, seed=init_seed, truncated=truncated)
    model_b = model_a if siamese else UnetPP(model_config, seed=init_seed,
                                             truncated=truncated)
    flat = {f"{tag}/{n}": t for tag, m in
            ([("a", model_a)] if siamese else [("a", model_a), ("b", model_b)])
            for n, t in m.parameter_items()}
    opt = Optimizer(opt_config, flat)
    return TrainState(model_a=model_a, model_b=model_b, optimizer=opt,
                      model_config=model_config, opt_config=opt_config,
                      policy=policy, seed=int(seed), siamese=bool(siamese))


def _pair_input(arr, dtype):
    return T.Tensor(arr.astype(dtype, copy=False)[None, None])


def pair_loss_terms(model_a, model_b, pairs, depth=None, frozen_targets=None,
                    trace=None):
    """Per-pair losses plus the eta-weighted total.

    frozen_targets, when given, holds each pair's (P_A, P_B) arrays captured
    beforehand; the loss then uses those as the constant target branches
    instead of detaching the live outputs.  The gradient is identical (the
    stop-gradient branch contributes none), but the frozen form is what a
    finite-difference probe can evaluate consistently.
    """
    per = []
    for i, pair in enumerate(pairs):
        tr_a = {} if trace is not None else None
        tr_b = {} if trace is not None else None
        pa = model_a.forward(_pair_input(pair.slice_a, model_a.dtype), depth=depth,
                             trace=tr_a)
        pb = model_b.forward(_pair_input(pair.slice_b, model_b.dtype), depth=depth,
                             trace=tr_b)
        if trace is not None:
            trace.update({f"pair{i}/a/{k}": v for k, v in tr_a.items()})
            trace.update({f"pair{i}/b/{k}": v for k, v in tr_b.items()})
        if frozen_targets is None:
            if pair.kind == "cross":
                loss = losses.negative_pair_loss(pa, pb)
            else:
                loss = losses.positive_pair_loss(pa, pb)
        else:
            ta = T.Tensor(frozen_targets[i][0])
            tb = T.Tensor(frozen_targets[i][1])
            if pair.kind == "cross":
                ta, tb = losses._complement(ta), losses._complement(tb)
            loss = (losses.hybrid_loss(ta, pb) + losses.hybrid_loss(tb, pa)) * 0.5
        per.append(loss)
    total = losses.total_loss(per, [p.eta for p in pairs])
    return total, per


def capture_targets(model_a, model_b, pairs, depth=None):
    """Forward-only probability maps used as frozen targets."""
    out = []
    for pair in pairs:
        pa = model_a.forward(_pair_input(pair.slice_a, model_a.dtype), depth=depth)
        pb = model_b.forward(_pair_input(pair.slice_b, model_b.dtype), depth=depth)
        out.append((pa.data.copy(), pb.data.copy()))
    return out


def _pair_provenance(pair):
    return {"kind": pair.kind, "source_a": pair.source_a, "source_b": pair.source_b,
            "coords": pair.coords, "eta": pair.eta, "draws": pair.draws}


def train_step(state, pairs):
    """One optimizer tick over a pair batch -> metrics dict."""
    if not pairs:
        raise ValueError("empty pair batch")
    for _, model in state.models():
        model.zero_grads()
    try:
        total, per = pair_loss_terms(state.model_a, state.model_b, pairs)
        T.backward(total)
    except NumericError as e:
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step}: {e}",
            provenance=[_pair_provenance(p) for p in pairs]) from e

    grads = {f"{tag}/{n}": t.grad for tag, m in state.models()
             for n, t in m.parameter_items()}
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(g.astype(np.float64) ** 2))
    state.optimizer.step(grads)
    state.step += 1

    pos = [l.item() for l, p in zip(per, pairs) if p.kind != "cross"]
    neg = [l.item() for l, p in zip(per, pairs) if p.kind == "cross"]
    return {"step": state.step,
            "total_loss": total.item(),
            "pos_loss_mean": float(np.mean(pos)) if pos else float("nan"),
            "neg_loss_mean": float(np.mean(neg)) if neg else float("nan"),
            "grad_norm": math.sqrt(sq)}


# -- state serialization ----------------------------------------------------

def _config_text(state):
    d = {}
    for k, v in state.model_config.to_dict().items():
        d[f"model.{k}"] = v
    oc = state.opt_config
    d.update({"opt.kind": oc.kind, "opt.lr": repr(oc.lr), "opt.beta1": repr(oc.beta1),
              "opt.beta2": repr(oc.beta2), "opt.eps": repr(oc.eps)})
    pl = state.policy
    d.update({"policy.n_augment": pl.n_augment, "policy.n_normal": pl.n_normal,
              "policy.n_cross": pl.n_cross, "policy.tile_size": pl.tile_size,
              "policy.default_eta": repr(pl.default_eta)})
    d.update({"train.seed": state.seed, "train.step": state.step,
              "train.siamese": int(state.siamese),
              "train.truncated": int(state.model_a.truncated),
              "train.marker_channel": state.marker_channel})
    return "".join(f"{k}={d[k]}\n" for k in sorted(d))


def _parse_config_text(text, path):
    d = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise DataError(f"{path}: bad config line {line!r}")
        k, v = line.split("=", 1)
        d[k] = v
    return d


def save_state(state, path):
    tensors = {}
    for tag, model in state.models():
        for name, arr in model.state_arrays().items():
            tensors[f"model_{tag}/{name}"] = arr
    opt = state.optimizer
    if opt.config.kind == "adam":
        for key in opt.m:
            tensors[f"opt/m/{key}"] = opt.m[key]
            tensors[f"opt/v/{key}"] = opt.v[key]
    checkpoint.save_checkpoint(path, _config_text(state), tensors)


def load_state(path):
    config_text, tensors = checkpoint.load_checkpoint(path)
    d = _parse_config_text(config_text, path)
    try:
        model_config = UnetPPConfig.from_dict(
            {k[len("model."):]: v for k, v in d.items() if k.startswith("model.")})
        opt_config = OptimizerConfig(kind=d["opt.kind"], lr=float(d["opt.lr"]),
                                     beta1=float(d["opt.beta1"]),
                                     beta2=float(d["opt.beta2"]),
                                     eps=float(d["opt.eps"]))
        policy = augment.PairPolicy(n_augment=int(d["policy.n_augment"]),
                                    n_normal=int(d["policy.n_normal"]),
                                    n_cross=int(d["policy.n_cross"]),
                                    tile_size=int(d["policy.tile_size"]),
                                    default_eta=float(d["policy.default_eta"]))
        seed = int(d["train.seed"])
        step = int(d["train.step"])
        siamese = bool(int(d["train.siamese"]))
        truncated = bool(int(d.get("train.truncated", "0")))
        marker_channel = int(d["train.marker_channel"])
    except KeyError as e:
        raise DataError(f"{path}: config block missing key {e}") from None

    state = init_state(model_config, opt_config, policy, seed, siamese=siamese,
                       truncated=truncated)
    state.step = step
    state.marker_channel = marker_channel
    state.optimizer.t = step
    for tag, model in state.models():
        prefix = f"model_{tag}/"
        named = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        try:
            model.load_state(named)
        except ValueError as e:
            raise DataError(f"{path}: {e}") from None
    if opt_config.kind == "adam":
        for key in state.optimizer.params:
            for slot, store in (("m", state.optimizer.m), ("v", state.optimizer.v)):
                full = f"opt/{slot}/{key}"
                if full not in tensors:
                    raise DataError(f"{path}: missing optimizer moment {full!r}")
                arr = tensors[full]
                if arr.shape != store[key].shape:
                    raise DataError(f"{path}: moment shape mismatch for {full!r}")
                store[key] = arr.copy()
    return state


def prune_state(state, depth):
    """Truncate both models to head `depth`, keeping optimizer moments for
    the surviving parameters; head outputs stay bit-identical."""
    model_a = state.model_a.prune(depth)
    model_b = model_a if state.siamese else state.model_b.prune(depth)
    new = TrainState(model_a=model_a, model_b=model_b, optimizer=None,
                     model_config=model_a.config, opt_config=state.opt_config,
                     policy=state.policy, seed=state.seed, step=state.step,
                     siamese=state.siamese, marker_channel=state.marker_channel)
    flat = {f"{tag}/{n}": t for tag, m in new.models() for n, t in m.parameter_items()}
    opt = Optimizer(state.opt_config, flat)
    opt.t = state.optimizer.t
    if state.opt_config.kind == "adam":
        for key in flat:
            opt.m[key] = state.optimizer.m[key].copy()
            opt.v[key] = state.optimizer.v[key].copy()
    new.optimizer = opt
    return new


# -- inference --------------------------------------------------------------

def stitch_probs(state, image, depth=None):
    """Forward model_a over raster tiles -> stitched 2 x S x S probability map."""
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise DataError(f"inference expects a square image, got shape {image.shape}")
    s = image.shape[0]
    t = state.policy.tile_size
    if s % t != 0:
        raise DataError(f"tile size {t} does not divide image size {s}")
    out = np.zeros((2, s, s), dtype=np.float32)
    for (r, c), sl in augment.tile(image, t):
        prob = state.model_a.forward(_pair_input(sl, state.model_a.dtype), depth=depth)
        out[:, r * t:(r + 1) * t, c * t:(c + 1) * t] = prob.data[0]
    return out


def infer_state(state, image, depth=None, threshold=0.5):
    probs = stitch_probs(state, image, depth=depth)
    return probs[state.marker_channel] > threshold


def infer(ckpt_path, image, depth=None, threshold=0.5):
    """Tile, forward model_a, stitch the marker channel, threshold -> mask."""
    return infer_state(load_state(ckpt_path), image, depth=depth, threshold=threshold)


def calibrate_marker_channel(state, batch, depth=None):
    """Pick the output channel that tracks positive-labeled images.

    Uses image-level labels only: the marker channel is the one whose mean
    activation is higher on positive-labeled than negative-labeled images.
    Falls back to the current channel when a class is absent.
    """
    means = {"pos": [], "neg": []}
    for b in batch:
        probs = stitch_probs(state, b.image, depth=depth)
        means[b.label].append(probs.mean(axis=(1, 2)))
    if not means["pos"] or not means["neg"]:
        return state.marker_channel
    gap = np.mean(means["pos"], axis=0) - np.mean(means["neg"], axis=0)
    return 1 if gap[1] >= gap[0] else 0


# -- the loop ---------------------------------------------------------------

def format_metrics_line(m):
    return (f"{m['step']}\t{m['total_loss']:.6f}\t{m['pos_loss_mean']:.6f}"
            f"\t{m['neg_loss_mean']:.6f}\t{m['grad_norm']:.6f}")


def run_training(data_dir, model_config, opt_config, policy, steps, seed,
                 out_path, checkpoint_every=0, siamese=False, resume_from=None,
                 log_path=None):
    """Train for `steps` total steps and write checkpoint + metrics log.

    With resume_from, the checkpoint's own config snapshot governs and
    training continues from its recorded step up to `steps`.
    """
    if resume_from is not None:
        state = load_state(resume_from)
    else:
        state = init_state(model_config, opt_config, policy, seed, siamese=siamese)
    if steps < state.step:
        raise ValueError(f"target steps {steps} below checkpoint step {state.step}")

    batch = augment.load_batch(data_dir, "train")
    metrics = []
    lines = []
    for i in range(state.step, steps):
        step_seed = derive_key(state.seed, "step", f"{i:06d}")
        pairs = augment.make_pairs(batch, step_seed, state.policy)
        m = train_step(state, pairs)
        metrics.append(m)
        lines.append(format_metrics_line(m))
        if checkpoint_every and state.step % checkpoint_every == 0:
            save_state(state, out_path)

    state.marker_channel = calibrate_marker_channel(state, batch)
    save_state(state, out_path)
    if log_path is None:
        log_path = out_path + ".log"
    with open(log_path, "w", encoding="ascii") as fh:
        for line in lines:
            fh.write(line + "\n")
    return state, metrics
