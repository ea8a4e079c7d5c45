"""Adam optimizer, training/eval loops, and checkpoint persistence.

Training is fully deterministic given (config, seed): the dataset is a
pure function of derived seeds, batches run in a fixed order, and numpy
single-threaded kernels guarantee bit-identical loss histories.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, NumericError, ShapeError
from .fileio import load_named_tensors, save_named_tensors
from .metrics import EvalReport, evaluate_pair, l1_loss
from .net import VINet
from .synthdata import add_gaussian_noise, gen_clip, make_clip_pair, random_clip_spec


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 2
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    task: str = "interpolate"
    clips: int = 16
    eval_clips: int = 8
    size: int = 32
    num_frames: int = 5
    motion: float = 4.0
    num_objects: int = 2
    noise_sigma: float = 0.0
    eval_every: int = 5
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.clips < 1:
            raise ShapeError("epochs, batch_size and clips must be positive")
        if self.learning_rate < 0:
            raise ShapeError("learning_rate must be >= 0")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad for '{name}' has shape {g.shape}, "
                             f"param has {p.shape}")
        if not np.isfinite(g).all():
            bad = int(np.flatnonzero(~np.isfinite(g))[0])
            raise NumericError(f"adam_step: non-finite gradient in '{name}' "
                               f"at flat index {bad}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= (config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)).astype(p.dtype)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                              for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# --- datasets ---------------------------------------------------------------

@dataclass
class Sample:
    inputs: np.ndarray
    targets: np.ndarray          # loss target (full supervision)
    eval_targets: np.ndarray     # metric target (task-specific frames)
    eval_slice: slice            # which output frames the metrics look at


def _interp_sample(seed: int, cfg: TrainConfig) -> Sample:
    spec = random_clip_spec(seed, size=cfg.size, motion=cfg.motion,
                            num_objects=cfg.num_objects, num_frames=5)
    pair = make_clip_pair(spec)
    full = np.concatenate([pair.inputs[:, :, :1], pair.targets, pair.inputs[:, :, 1:]],
                          axis=2)  # frames 0..4 in order
    return Sample(pair.inputs, full, pair.targets, slice(1, 4))


def _denoise_sample(seed: int, cfg: TrainConfig) -> Sample:
    spec = random_clip_spec(seed, size=cfg.size, motion=cfg.motion,
                            num_objects=cfg.num_objects, num_frames=cfg.num_frames)
    clean = gen_clip(spec)
    noisy = add_gaussian_noise(clean, cfg.noise_sigma, seed=seed + 1)
    return Sample(noisy, clean, clean, slice(None))


def make_dataset(cfg: TrainConfig, count: int, seed_base: int) -> list[Sample]:
    maker = _interp_sample if cfg.task == "interpolate" else _denoise_sample
    return [maker(seed_base + 977 * i, cfg) for i in range(count)]


# --- loops -------------------------------------------------------------------

def evaluate(net: VINet, samples: list[Sample]) -> list[EvalReport]:
    reports = []
    for i, s in enumerate(samples):
        pred = net.forward(s.inputs)
        reports.append(evaluate_pair(i, pred[:, :, s.eval_slice], s.eval_targets))
    return reports


@dataclass
class TrainResult:
    loss_rows: list[tuple[int, float]]          # (step, loss), one per step
    epoch_losses: list[float]
    eval_history: list[tuple[int, float, float]]  # (epoch, psnr, ssim)
    adam_state: "AdamState | None" = None


def train_loop(net: VINet, config: TrainConfig,
               abort_checkpoint_path=None) -> TrainResult:
    if net.spec.task != config.task:
        raise ShapeError(f"net task '{net.spec.task}' does not match "
                         f"config task '{config.task}'")
    train_set = make_dataset(config, config.clips, seed_base=config.seed * 100_003 + 11)
    eval_set = make_dataset(config, config.eval_clips, seed_base=900_001)

    params = net.parameters()
    state = AdamState.init(params)
    rows: list[tuple[int, float]] = []
    epoch_losses: list[float] = []
    eval_history: list[tuple[int, float, float]] = []
    step = 0

    for epoch in range(1, config.epochs + 1):
        losses = []
        for start in range(0, len(train_set), config.batch_size):
            batch = train_set[start:start + config.batch_size]
            x = np.concatenate([s.inputs for s in batch], axis=0)
            t = np.concatenate([s.targets for s in batch], axis=0)
            pred = net.forward(x, keep_state=True)
            loss, grad = l1_loss(pred, t)
            if not np.isfinite(loss):
                if abort_checkpoint_path is not None:
                    save_checkpoint(abort_checkpoint_path, net, state, config_echo="diverged")
                raise NumericError(f"training diverged at step {step}: loss={loss}"
                                   + (f"; last checkpoint at {abort_checkpoint_path}"
                                      if abort_checkpoint_path else ""))
            net.backward(grad)
            clip_grad_norm(net.grads, config.grad_clip)
            adam_step(params, net.grads, state, config)
            for name, p in params.items():
                if not np.isfinite(p).all():
                    raise NumericError(f"parameter '{name}' became non-finite "
                                       f"at step {step}")
            step += 1
            rows.append((step, loss))
            losses.append(loss)
        epoch_losses.append(sum(losses) / len(losses))
        if config.eval_every and epoch % config.eval_every == 0:
            reps = evaluate(net, eval_set)
            psnr_m = sum(r.psnr_mean for r in reps) / len(reps)
            ssim_m = sum(r.ssim_mean for r in reps) / len(reps)
            eval_history.append((epoch, psnr_m, ssim_m))

    return TrainResult(rows, epoch_losses, eval_history, adam_state=state)


def write_loss_csv(path, rows: list[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for step, loss in rows:
            writer.writerow([step, repr(loss)])


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, net: VINet, state: AdamState | None = None,
                    config_echo: str = "") -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, p in net.parameters().items():
        tensors[f"param/{name}"] = p
    if state is not None:
        for name, m in state.m.items():
            tensors[f"adam.m/{name}"] = m
        for name, v in state.v.items():
            tensors[f"adam.v/{name}"] = v
        tensors["step"] = np.array([float(state.step)], dtype=np.float64)
    tensors["config"] = np.frombuffer(config_echo.encode("utf-8"), dtype=np.uint8).copy() \
        if config_echo else np.zeros(0, dtype=np.uint8)
    save_named_tensors(path, tensors)


def load_checkpoint(path, net: VINet) -> tuple[AdamState | None, str]:
    """Restore parameters (bit-identical) into net; returns (adam state, config echo)."""
    tensors = load_named_tensors(path)
    params = net.parameters()
    # Validate everything before touching the net: a failed load must not
    # leave a partially restored parameter set behind.
    for name, p in params.items():
        key = f"param/{name}"
        if key not in tensors:
            raise CheckpointError(f"{path}: missing tensor '{key}'")
        if tensors[key].shape != p.shape:
            raise CheckpointError(f"{path}: tensor '{key}' has shape "
                                  f"{tensors[key].shape}, net expects {p.shape}")
    for name, p in params.items():
        p[...] = tensors[f"param/{name}"].astype(p.dtype)
    state = None
    if "step" in tensors:
        state = AdamState(
            m={n: tensors[f"adam.m/{n}"].astype(p.dtype)
               for n, p in params.items() if f"adam.m/{n}" in tensors},
            v={n: tensors[f"adam.v/{n}"].astype(p.dtype)
               for n, p in params.items() if f"adam.v/{n}" in tensors},
            step=int(tensors["step"][0]))
    echo = tensors.get("config", np.zeros(0, dtype=np.uint8)).tobytes().decode("utf-8")
    return state, echo
