"""Flow-matching action-chunk policy.

A small fully connected velocity network regresses the constant target
velocity (chunk - noise) along the linear interpolant between Gaussian noise
and the action chunk. Sampling integrates the learned field with 10 Euler
steps from tau=0 to tau=1; the receding-horizon executor runs the first half
of each sampled chunk and replans.

Network input layout (one row): [observation, interpolant x_tau, tau].
Gradients are exact reverse-mode, computed in the dtype of the parameters so
tests can run the identical code path in float64 against finite differences.
Parameters live in float32.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .data import Dataset, EmptyDataset, FormatError, chunk_targets, training_view
from .env import EnvConfig, EnvState, STATUS_RUNNING, clip_action, observe, step

EULER_STEPS = 10
DEFAULT_HIDDEN = (256, 256, 256)
# The network predicts the displacement-to-data and a fixed 1/(1-tau) output
# gain converts it to a velocity (the flow analog of x0- vs eps-prediction in
# diffusion). The gain is capped near tau=1 where the conversion blows up.
GAIN_TAU_CAP = 0.95
# Fixed input standardization for the position-like observation features
# (pos x/y and goal distance): workspace coordinates vary on a much finer
# scale than the +-3 interpolant inputs, and the net must resolve ~0.01
# position differences. Constant rescaling, so it is equivalent to a
# per-column first-layer init; observations stay raw outside the net.
OBS_POS_SCALE = 8.0
OBS_POS_CENTER = 0.5
# Training draws tau over the range the Euler sampler actually queries
# (grid points 0, 0.1, ..., 0.9). The target at tau -> 1 has unbounded
# Lipschitz constant in the interpolant and cannot be fit by any
# bounded-weight net, so the unsupervisable sliver is left out.
TRAIN_TAU_MAX = 0.9


class NonFiniteLoss(FloatingPointError):
    """The loss or a gradient went non-finite."""


class NonFiniteOutput(FloatingPointError):
    """A sampled chunk went non-finite."""


@dataclass(frozen=True)
class NetDims:
    obs_dim: int
    horizon: int = 8
    act_dim: int = 2
    hidden: tuple[int, ...] = DEFAULT_HIDDEN

    @property
    def chunk_dim(self) -> int:
        return self.horizon * self.act_dim

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.chunk_dim + 1

    def layer_shapes(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden, self.chunk_dim]
        return [(sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)]

    def param_count(self) -> int:
        return sum(n_in * n_out + n_out for n_in, n_out in self.layer_shapes())

    def to_json(self) -> dict:
        return {
            "obs": self.obs_dim,
            "H": self.horizon,
            "A": self.act_dim,
            "hidden": list(self.hidden),
        }

    @staticmethod
    def from_json(doc: dict) -> "NetDims":
        return NetDims(
            obs_dim=int(doc["obs"]),
            horizon=int(doc["H"]),
            act_dim=int(doc["A"]),
            hidden=tuple(int(h) for h in doc["hidden"]),
        )


@dataclass(frozen=True, eq=False)
class PolicyParams:
    dims: NetDims
    seed: int
    theta: np.ndarray  # flat, layer order: W row-major then b, per layer
    train_steps: int = 0

    def __post_init__(self):
        theta = np.asarray(self.theta)
        if theta.shape != (self.dims.param_count(),):
            raise ValueError(
                f"theta length {theta.shape} inconsistent with dims ({self.dims.param_count()})"
            )
        if not np.isfinite(theta).all():
            raise ValueError("theta contains non-finite values")
        object.__setattr__(self, "theta", theta)


def unpack(theta: np.ndarray, dims: NetDims) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of (W, b) per layer over the flat parameter vector."""
    layers = []
    off = 0
    for n_in, n_out in dims.layer_shapes():
        w = theta[off : off + n_in * n_out].reshape(n_in, n_out)
        off += n_in * n_out
        b = theta[off : off + n_out]
        off += n_out
        layers.append((w, b))
    return layers


def init_params(seed: int, dims: NetDims) -> PolicyParams:
    """Fan-in-scaled uniform init; output layer zeroed so the field starts at 0."""
    shapes = dims.layer_shapes()
    theta = np.zeros(dims.param_count(), dtype=np.float32)
    off = 0
    for i, (n_in, n_out) in enumerate(shapes):
        g = rng.stream(seed, i, rng.PARAM_INIT)
        bound = 1.0 / math.sqrt(n_in)
        if i < len(shapes) - 1:
            w = g.uniform(-bound, bound, size=(n_in, n_out))
            b = g.uniform(-bound, bound, size=n_out)
            theta[off : off + n_in * n_out] = w.astype(np.float32).ravel()
            theta[off + n_in * n_out : off + n_in * n_out + n_out] = b.astype(np.float32)
        off += n_in * n_out + n_out
    return PolicyParams(dims=dims, seed=seed, theta=theta)


def _silu(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def obs_feature_transform(dims: NetDims, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """(center, scale) for the fixed standardization of observation inputs.

    Task observations have the layout [pos(2), stage one-hot(M), goal
    distance, corridor flag, bounce recency] with M = obs_dim - 5; the
    position-like entries are rescaled, the rest pass through. Observation
    vectors too short for that layout (small test nets) pass through whole.
    """
    center = np.zeros(dims.obs_dim, dtype=dtype)
    scale = np.ones(dims.obs_dim, dtype=dtype)
    if dims.obs_dim >= 6:
        center[0:2] = OBS_POS_CENTER
        scale[0:2] = OBS_POS_SCALE
        scale[dims.obs_dim - 3] = OBS_POS_SCALE
    return center, scale


def _scale_obs(dims: NetDims, obs: np.ndarray) -> np.ndarray:
    center, scale = obs_feature_transform(dims, obs.dtype)
    return (obs - center) * scale


def _forward(theta: np.ndarray, dims: NetDims, x: np.ndarray, want_cache: bool = False):
    """Fully connected net, silu hidden activations, linear output."""
    layers = unpack(theta, dims)
    h = x
    hs = [h]
    sig = []
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        if i < len(layers) - 1:
            h, s = _silu(z)
            if want_cache:
                sig.append((z, s))
        else:
            h = z
        if want_cache:
            hs.append(h)
    return (h, hs, sig) if want_cache else h


def _gain(tau, dtype) -> np.ndarray:
    """Fixed displacement-to-velocity conversion factor 1/(1-tau), capped."""
    t = np.minimum(np.asarray(tau, dtype=dtype), dtype.type(GAIN_TAU_CAP))
    return (1.0 / (1.0 - t)).astype(dtype)


def velocity(params: PolicyParams, obs: np.ndarray, x_tau: np.ndarray, tau) -> np.ndarray:
    """Batched field evaluation v(tau, obs, x_tau). Accepts [B, .] or flat inputs."""
    dt = params.theta.dtype
    obs = np.atleast_2d(np.asarray(obs, dtype=dt))
    x_tau = np.atleast_2d(np.asarray(x_tau, dtype=dt))
    tau_col = np.broadcast_to(np.asarray(tau, dtype=dt).reshape(-1, 1), (obs.shape[0], 1))
    x = np.concatenate([_scale_obs(params.dims, obs), x_tau, tau_col], axis=1)
    out = _forward(params.theta, params.dims, x)
    return out * _gain(tau_col, np.dtype(dt))


@dataclass(frozen=True, eq=False)
class FlowBatch:
    """Training minibatch: observations, target chunks, noise and flow times."""

    obs: np.ndarray  # [B, obs_dim]
    chunks: np.ndarray  # [B, H*A]
    noise: np.ndarray  # [B, H*A]
    tau: np.ndarray  # [B]

    def __post_init__(self):
        b = self.obs.shape[0]
        if b == 0:
            raise EmptyDataset("empty flow batch")
        if self.chunks.shape != self.noise.shape or self.chunks.shape[0] != b or self.tau.shape != (b,):
            raise ValueError("inconsistent batch shapes")
        if float(self.tau.min()) < 0.0 or float(self.tau.max()) > 1.0:
            raise ValueError("tau outside [0, 1]")


def interpolant(batch: FlowBatch) -> np.ndarray:
    """Linear path (1-tau) * noise + tau * chunk; endpoints reproduce exactly."""
    t = batch.tau[:, None]
    return (1.0 - t) * batch.noise + t * batch.chunks


def loss_and_grad(params: PolicyParams, batch: FlowBatch) -> tuple[float, np.ndarray]:
    """Mean squared-norm regression of the field onto (chunk - noise).

    Exact reverse-mode gradient with a fixed reduction order; deterministic
    for a fixed batch. Computed in the dtype of params.theta.
    """
    dt = params.theta.dtype
    obs = batch.obs.astype(dt, copy=False)
    chunks = batch.chunks.astype(dt, copy=False)
    noise = batch.noise.astype(dt, copy=False)
    tau = batch.tau.astype(dt, copy=False)

    b = obs.shape[0]
    x_tau = (1.0 - tau[:, None]) * noise + tau[:, None] * chunks
    x = np.concatenate([_scale_obs(params.dims, obs), x_tau, tau[:, None]], axis=1)
    target = chunks - noise

    out, hs, sig = _forward(params.theta, params.dims, x, want_cache=True)
    gain = _gain(tau, np.dtype(dt))[:, None]
    resid = out * gain - target
    loss = float((resid * resid).sum(axis=1).mean())
    if not math.isfinite(loss):
        raise NonFiniteLoss("non-finite flow-matching loss")

    layers = unpack(params.theta, params.dims)
    grad = np.zeros_like(params.theta)
    glayers = unpack(grad, params.dims)

    g = resid * (2.0 / b) * gain
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = glayers[i]
        h_in = hs[i]
        gw[...] = h_in.T @ g
        gb[...] = g.sum(axis=0)
        if i > 0:
            z, s = sig[i - 1]
            g = (g @ w.T) * (s * (1.0 + z * (1.0 - s)))
    if not np.isfinite(grad).all():
        raise NonFiniteLoss("non-finite gradient")
    return loss, grad


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    Training length is a fixed optimizer-step budget when step_budget > 0
    (epochs derived by cycling reshuffled passes); otherwise classic epochs.
    Desk-scale fit quality needs a roughly constant number of Adam steps
    regardless of dataset size, so the step budget is the default.
    """

    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 60
    step_budget: int = 16000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 200
    # exponential moving average of the weights; the averaged net is what
    # training returns (0 disables)
    ema_decay: float = 0.999

    def total_steps(self, n_samples: int) -> int:
        per_epoch = max(1, (n_samples + self.batch_size - 1) // self.batch_size)
        if self.step_budget > 0:
            return self.step_budget
        return self.epochs * per_epoch

    def to_json(self) -> dict:
        return {
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "step_budget": self.step_budget,
            "seed": self.seed,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "warmup_steps": self.warmup_steps,
            "ema_decay": self.ema_decay,
        }

    @staticmethod
    def from_json(doc: dict) -> "TrainConfig":
        return TrainConfig(
            lr=float(doc.get("lr", 1e-3)),
            batch_size=int(doc.get("batch_size", 256)),
            epochs=int(doc.get("epochs", 60)),
            step_budget=int(doc.get("step_budget", 16000)),
            seed=int(doc.get("seed", 0)),
            beta1=float(doc.get("beta1", 0.9)),
            beta2=float(doc.get("beta2", 0.999)),
            eps=float(doc.get("eps", 1e-8)),
            warmup_steps=int(doc.get("warmup_steps", 200)),
            ema_decay=float(doc.get("ema_decay", 0.999)),
        )


def build_training_arrays(dataset: Dataset, dims: NetDims) -> tuple[np.ndarray, np.ndarray]:
    """Materialize (obs, flattened chunk target) rows from the training view."""
    view = training_view(dataset)
    if not view:
        raise EmptyDataset("dataset has no trainable frames")
    obs = np.stack([span.frames[i].obs for span, i in view]).astype(np.float32)
    chunks = np.stack(
        [chunk_targets(span, i, dims.horizon).ravel() for span, i in view]
    ).astype(np.float32)
    return obs, chunks


def train_arrays(
    params: PolicyParams, obs: np.ndarray, chunks: np.ndarray, cfg: TrainConfig
) -> PolicyParams:
    """Adam (decoupled weight decay 0) over shuffled minibatches, with linear
    warmup and cosine decay to zero.

    Noise and flow times are sampled fresh for every visit of a sample.
    Deterministic given (params, data, cfg): fixed shuffling, fixed batch
    order, single-threaded reduction.
    """
    n = obs.shape[0]
    if n == 0:
        raise EmptyDataset("no training samples")
    d = params.dims.chunk_dim
    theta = params.theta.astype(np.float32).copy()
    ema = theta.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    g = rng.stream(cfg.seed, rng.TRAIN)
    total = cfg.total_steps(n)
    warmup = min(cfg.warmup_steps, max(1, total // 10))
    t = 0
    while t < total:
        perm = g.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            if t >= total:
                break
            idx = perm[lo : lo + cfg.batch_size]
            batch = FlowBatch(
                obs=obs[idx],
                chunks=chunks[idx],
                noise=g.standard_normal((idx.size, d), dtype=np.float32),
                tau=g.random(idx.size, dtype=np.float32) * np.float32(TRAIN_TAU_MAX),
            )
            work = replace(params, theta=theta, train_steps=params.train_steps + t)
            _, grad = loss_and_grad(work, batch)
            t += 1
            lr_t = cfg.lr * min(1.0, t / warmup) * 0.5 * (1.0 + math.cos(math.pi * t / total))
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
            mhat = m / (1.0 - cfg.beta1**t)
            vhat = v / (1.0 - cfg.beta2**t)
            theta = theta - np.float32(lr_t) * mhat / (np.sqrt(vhat) + np.float32(cfg.eps))
            if cfg.ema_decay > 0.0:
                # delta form: exact no-op when theta stands still
                ema += np.float32(1.0 - cfg.ema_decay) * (theta - ema)
    final = ema if cfg.ema_decay > 0.0 else theta
    return replace(params, theta=final.astype(np.float32), train_steps=params.train_steps + t)


def train(params: PolicyParams, dataset: Dataset, cfg: TrainConfig) -> PolicyParams:
    obs, chunks = build_training_arrays(dataset, params.dims)
    return train_arrays(params, obs, chunks, cfg)


def euler_integrate(field, x0: np.ndarray, n_steps: int = EULER_STEPS) -> np.ndarray:
    """Integrate dx/dtau = field(tau, x) from tau=0 to 1 with fixed Euler steps."""
    x = np.array(x0, copy=True)
    h = 1.0 / n_steps
    for k in range(n_steps):
        x = x + h * np.asarray(field(k / n_steps, x), dtype=x.dtype)
    return x


def sample_chunk(params: PolicyParams, obs: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """Draw noise and integrate the learned field; returns an [H, A] chunk."""
    d = params.dims.chunk_dim
    x0 = gen.standard_normal(d, dtype=np.float32)

    def field(tau: float, x: np.ndarray) -> np.ndarray:
        return velocity(params, obs, x[None, :], np.float32(tau))[0]

    x = euler_integrate(field, x0)
    if not np.isfinite(x).all():
        raise NonFiniteOutput("sampled chunk is non-finite")
    return x.reshape(params.dims.horizon, params.dims.act_dim)


@dataclass(frozen=True, eq=False)
class StepRecord:
    """One executed env transition: the observation acted on, the action, and
    the event produced."""

    obs: np.ndarray
    act: np.ndarray
    event: str


def executed_per_plan(horizon: int) -> int:
    return (horizon + 1) // 2


def executor_step(
    params: PolicyParams,
    state: EnvState,
    env_cfg: EnvConfig,
    gen: np.random.Generator,
) -> tuple[EnvState, list[StepRecord]]:
    """Sample one chunk, run its first half (clipped), and hand back control."""
    chunk = sample_chunk(params, observe(state, env_cfg), gen)
    records: list[StepRecord] = []
    for row in chunk[: executed_per_plan(params.dims.horizon)]:
        if state.status != STATUS_RUNNING:
            break
        act = clip_action(row, env_cfg.action_clip)
        obs = observe(state, env_cfg)
        state = step(state, act, env_cfg)
        records.append(StepRecord(obs=obs, act=act.astype(np.float32), event=state.last_event))
    return state, records


# ---------------------------------------------------------------------------
# Policy file format: one JSON header line, newline, little-endian float32
# parameter blob in layer order (W row-major, then b, per layer).
# ---------------------------------------------------------------------------


def save_policy(params: PolicyParams, path) -> None:
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    header = {
        "schema": 1,
        "dims": params.dims.to_json(),
        "seed": params.seed,
        "train_steps": params.train_steps,
    }
    blob = params.theta.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")
        f.write(blob)


def load_policy(path) -> PolicyParams:
    path = os.fspath(path)
    with open(path, "rb") as f:
        header_line = f.readline()
        blob = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}:1: bad policy header ({e})") from e
    if header.get("schema") != 1:
        raise FormatError(f"{path}:1: unsupported policy schema {header.get('schema')!r}")
    dims = NetDims.from_json(header["dims"])
    expected = dims.param_count() * 4
    if len(blob) != expected:
        raise FormatError(
            f"{path}:2: parameter blob is {len(blob)} bytes, expected {expected}"
        )
    theta = np.frombuffer(blob, dtype="<f4").astype(np.float32)
    return PolicyParams(
        dims=dims,
        seed=int(header.get("seed", 0)),
        theta=theta,
        train_steps=int(header.get("train_steps", 0)),
    )
