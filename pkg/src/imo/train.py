"""Joint training loop, evaluation and the ablation grid."""

import dataclasses
import io
import os
import time
from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.arrayio import atomic_write
from .core.tensor import Tensor, backward
from .diffusion import encode_mask_latent, forward_noise, predict_x0, single_pass_decode
from .errors import NonFiniteError, ValidationError
from .metrics import MetricsReport
from .model import Ablation, IMOModel, ModelConfig
from .phantom import collate

# softmax temperature applied to x0_hat before the soft-Dice term; the latent
# lives in [-1, 1] so a plain softmax would be far too flat
DICE_SHARPNESS = 4.0
DICE_SMOOTH = 1.0
HISTORY_COLUMNS = ("step", "total", "diff", "x0", "cls")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 4
    max_steps: int = 2000
    lambda_diff: float = 1.0
    lambda_x0: float = 0.5
    lambda_cls: float = 1.0
    sample_steps: int = 5
    terminal_fraction: float = 0.5
    seed: int = 0

    def validate(self):
        if self.lr < 0 or not np.isfinite(self.lr):
            raise ValidationError(f"lr must be a finite value >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 <= self.terminal_fraction <= 1:
            raise ValidationError(f"terminal_fraction must lie in [0, 1], got {self.terminal_fraction}")
        if self.batch_size < 1 or self.max_steps < 0 or self.sample_steps < 1:
            raise ValidationError("batch_size and sample_steps must be >= 1, max_steps >= 0")
        for k in ("lambda_diff", "lambda_x0", "lambda_cls"):
            if getattr(self, k) < 0:
                raise ValidationError(f"{k} must be >= 0")
        return self


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def soft_dice_loss(probs, target, smooth=DICE_SMOOTH):
    """``1 - mean_{n,k} (2 sum pq + s) / (sum p + sum q + s)`` over spatial axes."""
    q = Tensor(target, dtype=probs.dtype)
    axes = (2, 3)
    inter = ops.sum(ops.mul(probs, q), axis=axes)
    num = ops.add(ops.mul(inter, 2.0), Tensor(np.full(inter.shape, smooth), dtype=probs.dtype))
    den = ops.add(ops.sum(probs, axis=axes),
                  Tensor(target.sum(axis=axes) + smooth, dtype=probs.dtype))
    return ops.sub(Tensor(np.ones((), dtype=probs.dtype)), ops.mean(ops.div(num, den)))


def joint_loss(batch, model, cfg, t, eps, training=True, eps_fn=None):
    """Weighted sum of the noise-regression, soft-Dice and grading terms.

    ``t`` ``[N]`` and ``eps`` ``[N, 3, H, W]`` are supplied by the caller so the
    loss is a pure function of its arguments.  ``eps_fn(xt, t)`` optionally
    replaces the decoder (used to test the loss with an oracle).  Returns
    ``(total, parts)`` with ``parts`` the unweighted float terms.
    """
    ab = model.ablation
    weights = {"diff": cfg.lambda_diff, "x0": cfg.lambda_x0, "cls": cfg.lambda_cls}
    active = {k: w for k, w in weights.items()
              if w > 0 and not (ab.no_segmentation and k != "cls") and not (ab.no_grading and k == "cls")}
    if not active:
        raise ValidationError("no active loss term: every weight is zero or disabled by an ablation flag")
    dtype = model.dtype
    fused, skips = model.features(batch["fundus"], batch["oct"], training)
    terms = {}
    if not ab.no_segmentation:
        x0 = encode_mask_latent(batch["mask"]).astype(dtype)
        onehot = (x0 + 1) / 2
        if ab.no_ird:
            # single-pass arm: the decoder output is regressed onto x0 directly
            x0_hat = single_pass_decode(fused, skips, model.eps_net, model.sched)
            terms["diff"] = ops.mse(x0_hat, Tensor(x0))
            x0_hat = ops.clamp(x0_hat, -1.5, 1.5)
        else:
            eps = np.asarray(eps, dtype=dtype)
            xt = Tensor(forward_noise(x0, t, eps, model.sched))
            eps_hat = eps_fn(xt, t) if eps_fn is not None else model.eps(xt, t, fused, skips)
            terms["diff"] = ops.mse(eps_hat, Tensor(eps))
            x0_hat = predict_x0(xt, t, eps_hat, model.sched)
        if weights["x0"] > 0:
            probs = ops.softmax(ops.mul(x0_hat, DICE_SHARPNESS), axis=1)
            terms["x0"] = soft_dice_loss(probs, onehot)
    if not ab.no_grading:
        terms["cls"] = ops.cross_entropy(model.grade_logits(fused, training), batch["grade"])
    total = None
    for k, w in weights.items():
        if k in terms and k in active:
            term = ops.mul(terms[k], float(w))
            total = term if total is None else ops.add(total, term)
    parts = {k: float(terms[k].data) if k in terms else 0.0 for k in weights}
    return total, parts


# --------------------------------------------------------------------------
# optimiser and step
# --------------------------------------------------------------------------

class SGD:
    """Heavy-ball momentum: ``v <- mu v + g``; ``p <- p - lr v``."""

    def __init__(self, params, lr, momentum):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.trainable()}

    def step(self):
        lr = self.params.dtype.type(self.lr)
        mu = self.params.dtype.type(self.momentum)
        for k, t in self.params.trainable():
            if t.grad is None:
                continue
            v = self.velocity[k]
            v *= mu
            v += t.grad
            t.data -= lr * v


@dataclass
class TrainState:
    model: IMOModel
    cfg: TrainConfig
    opt: SGD
    rng: np.random.Generator
    step: int = 0
    history: list = dataclasses.field(default_factory=list)
    _order: list = dataclasses.field(default_factory=list)


def init_state(model_cfg=None, train_cfg=None, ablation=None, dtype=np.float32):
    """Model init and the per-run stream both come from ``default_rng(seed)``."""
    cfg = (train_cfg or TrainConfig()).validate()
    rng = np.random.default_rng(cfg.seed)
    model = IMOModel(model_cfg or ModelConfig(), ablation or Ablation(), rng=rng, dtype=dtype)
    return TrainState(model=model, cfg=cfg, opt=SGD(model.params, cfg.lr, cfg.momentum), rng=rng)


def _check_finite(loss, params):
    if np.isfinite(loss.data).all():
        return
    for k, t in params.trainable():
        if t.grad is not None and not np.isfinite(t.grad).all():
            raise NonFiniteError(f"non-finite loss {float(loss.data)}; first non-finite gradient in {k!r}")
    raise NonFiniteError(f"non-finite loss {float(loss.data)}")


def draw_noise(rng, mask, sched, terminal_fraction, dtype=np.float32):
    """Per-sample ``(t [N], eps [N, 3, H, W])`` for one training step.

    Draw order: t ~ U{1..T}, the terminal coin flips, then eps.  Samples that
    land on the terminal coin get ``t = T`` and the eps for which ``x_T`` is
    exactly the unit Gaussian draw, the state the sampler starts from.
    Without this the schedule's leftover signal at ``T`` lets the decoder
    copy the mask out of ``x_t`` and it never learns the pure-noise start.
    """
    n, (H, W) = mask.shape[0], mask.shape[-2:]
    t = rng.integers(1, sched.T + 1, size=n)
    terminal = rng.random(n) < terminal_fraction
    eps = rng.standard_normal((n, 3, H, W)).astype(dtype)
    if terminal.any():
        t[terminal] = sched.T
        c0, c1 = sched.coeffs(sched.T)
        x0 = encode_mask_latent(mask[terminal])
        eps[terminal] = ((eps[terminal] - c0 * x0) / c1).astype(dtype)
    return t, eps


def train_step(state, batch, t=None, eps=None):
    """One optimisation step; ``t`` / ``eps`` come from :func:`draw_noise` unless given."""
    model, cfg = state.model, state.cfg
    if t is None or eps is None:
        t, eps = draw_noise(state.rng, batch["mask"], model.sched, cfg.terminal_fraction, model.dtype)
    model.params.zero_grad()
    total, parts = joint_loss(batch, model, cfg, t, eps, training=True)
    backward(total)
    _check_finite(total, model.params)
    state.opt.step()
    model.params.zero_grad()
    rec = {"step": state.step, "total": float(total.data), **parts}
    state.history.append(rec)
    state.step += 1
    return rec


def _next_batch(state, samples):
    """Walk seeded epoch permutations; a batch never straddles two epochs."""
    bs = min(state.cfg.batch_size, len(samples))
    if len(state._order) < bs:
        state._order = state.rng.permutation(len(samples)).tolist()
    idx, state._order = state._order[:bs], state._order[bs:]
    return collate([samples[i] for i in idx])


def train(state, samples, steps=None, log=None, log_every=100):
    """Run ``steps`` (default ``cfg.max_steps``) steps over ``samples``."""
    steps = state.cfg.max_steps if steps is None else steps
    if not samples:
        raise ValidationError("empty training set")
    t0 = time.perf_counter()
    for _ in range(steps):
        rec = train_step(state, _next_batch(state, samples))
        if log is not None and (rec["step"] % log_every == 0):
            log(f"step={rec['step']} total={rec['total']:.5f} diff={rec['diff']:.5f} "
                f"x0={rec['x0']:.5f} cls={rec['cls']:.5f} elapsed={time.perf_counter() - t0:.1f}s")
    return state


def history_csv(history):
    buf = io.StringIO()
    buf.write(",".join(HISTORY_COLUMNS) + "\n")
    for r in history:
        buf.write(f"{r['step']}," + ",".join(repr(float(r[k])) for k in HISTORY_COLUMNS[1:]) + "\n")
    return buf.getvalue()


def write_history(path, history):
    atomic_write(path, history_csv(history).encode())


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def evaluate(model, samples, steps=5, seed=0, batch_size=8):
    """Eval-mode metrics; the sampler seed for batch ``b`` is ``seed + b``."""
    pred_masks, pred_grades = [], []
    for b, start in enumerate(range(0, len(samples), batch_size)):
        batch = collate(samples[start:start + batch_size])
        labels, probs = model.predict(batch["fundus"], batch["oct"], steps=steps, seed=seed + b)
        if labels is not None:
            pred_masks.extend(labels)
        if probs is not None:
            pred_grades.extend(probs.argmax(axis=1).tolist())
    ab = model.ablation
    return MetricsReport.build(
        pred_masks=None if ab.no_segmentation else pred_masks,
        true_masks=None if ab.no_segmentation else [s.mask for s in samples],
        pred_grades=None if ab.no_grading else pred_grades,
        true_grades=None if ab.no_grading else [s.grade for s in samples])


# --------------------------------------------------------------------------
# ablation grid
# --------------------------------------------------------------------------

ABLATION_ARMS = (
    ("w/o OCT", Ablation(no_oct=True)),
    ("w/o Grd.", Ablation(no_grading=True)),
    ("w/o Seg.", Ablation(no_segmentation=True)),
    ("w/o CMFA", Ablation(no_cmfa=True)),
    ("w/o IRD", Ablation(no_ird=True)),
    ("IMO", Ablation()),
)
TABLE_COLUMNS = ("method", "dice_disc", "dice_cup", "mdice", "precision")


def _row(name, rep):
    def f(v):
        return "-" if v is None else f"{v:.4f}"
    seg = rep.dice is not None
    return [name, f(rep.dice[1] if seg else None), f(rep.dice[2] if seg else None),
            f(rep.mdice), f(rep.precision)]


def format_table(rows):
    """CSV text and a column-aligned text rendering of the same rows."""
    all_rows = [list(TABLE_COLUMNS)] + rows
    csv = "".join(",".join(r) + "\n" for r in all_rows)
    widths = [max(len(r[i]) for r in all_rows) for i in range(len(TABLE_COLUMNS))]
    text = "".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip() + "\n"
                   for r in all_rows)
    return csv, text


def run_ablation_grid(train_samples, eval_samples, model_cfg=None, train_cfg=None,
                      steps=None, eval_seed=0, out_dir=None, log=None):
    """Train and evaluate every arm from the same seed; returns ``(rows, csv, text)``."""
    train_cfg = (train_cfg or TrainConfig()).validate()
    rows = []
    for name, ab in ABLATION_ARMS:
        state = init_state(model_cfg, train_cfg, ab)
        train(state, train_samples, steps=steps)
        rep = evaluate(state.model, eval_samples, steps=train_cfg.sample_steps, seed=eval_seed)
        rows.append(_row(name, rep))
        if log is not None:
            log(f"arm={name!r} " + " ".join(f"{k}={v}" for k, v in zip(TABLE_COLUMNS[1:], rows[-1][1:])))
    csv, text = format_table(rows)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        atomic_write(os.path.join(out_dir, "ablation.csv"), csv.encode())
        atomic_write(os.path.join(out_dir, "ablation.txt"), text.encode())
    return rows, csv, text
