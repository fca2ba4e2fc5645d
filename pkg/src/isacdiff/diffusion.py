"""Conditional denoising diffusion over per-UE channel vectors.

A UE's channel to all L APs is flattened to ``2*L*M`` reals by interleaving
(re, im) per entry. The reverse network predicts ``x_{t-1}`` directly from
``x_t``, a learned time embedding and the cross-modal conditioning vector.
Inference is deterministic: it starts from the scaled LS estimate and applies
the network once per step down to ``x_0``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, Sample
from .encoders import ConditionEncoder, EncoderConfig, location_features, sensing_planes
from .numerics import (
    MLP,
    Module,
    OptimizerState,
    Parameter,
    Tensor,
    concat,
    read_checkpoint,
    rmsprop_step,
    write_checkpoint,
)
from .numerics.layers import BN_EPS, BN_MOMENTUM
from .numerics.tensor import add, as_tensor, getitem, mul, reshape, sigmoid, square, tsum

log = logging.getLogger(__name__)

ALPHA_START = 0.9999
ALPHA_END = 0.98


class TrainingDivergedError(FloatingPointError):
    pass


class ConditioningMissingError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    alpha: np.ndarray       # [T], alpha[t-1] is the factor of step t
    alpha_bar: np.ndarray   # [T]

    @property
    def steps(self) -> int:
        return len(self.alpha)

    @property
    def sigma(self) -> np.ndarray:
        # deterministic reverse process
        return np.zeros(self.steps)

    def alpha_bar_at(self, t) -> np.ndarray:
        """Cumulative product for step t, with alpha_bar_0 = 1."""
        t = np.asarray(t)
        return np.where(t > 0, self.alpha_bar[np.maximum(t, 1) - 1], 1.0)


def make_schedule(steps: int) -> DiffusionSchedule:
    if steps < 2:
        raise ValueError(f"diffusion needs at least 2 steps, got {steps}")
    alpha = np.linspace(ALPHA_START, ALPHA_END, steps)
    return DiffusionSchedule(alpha, np.cumprod(alpha))


def forward_sample(x0: np.ndarray, t, schedule: DiffusionSchedule,
                   rng: np.random.Generator) -> np.ndarray:
    """Draw x_t ~ q(x_t | x_0) in closed form; ``t`` may be per-row."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > schedule.steps):
        raise IndexError(f"diffusion step {t} outside 0..{schedule.steps}")
    ab = schedule.alpha_bar_at(t)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * rng.standard_normal(x0.shape)


def forward_step(x_prev: np.ndarray, t, schedule: DiffusionSchedule,
                 rng: np.random.Generator) -> np.ndarray:
    """One Markov step x_{t-1} -> x_t."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.steps):
        raise IndexError(f"diffusion step {t} outside 1..{schedule.steps}")
    a = schedule.alpha[t - 1]
    if a.ndim:
        a = a.reshape(a.shape + (1,) * (x_prev.ndim - a.ndim))
    return np.sqrt(a) * x_prev + np.sqrt(1.0 - a) * rng.standard_normal(x_prev.shape)


def posterior_mean(x0: np.ndarray, x_t: np.ndarray, t, schedule: DiffusionSchedule) -> np.ndarray:
    """E[x_{t-1} | x_t, x_0] for the Gaussian chain; equals x0 at t = 1."""
    t = np.asarray(t)
    a = schedule.alpha[t - 1]
    ab_t = schedule.alpha_bar_at(t)
    ab_prev = schedule.alpha_bar_at(t - 1)
    c0 = np.sqrt(ab_prev) * (1.0 - a) / (1.0 - ab_t)
    ct = np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab_t)
    if c0.ndim:
        c0 = c0.reshape(c0.shape + (1,) * (x0.ndim - c0.ndim))
        ct = ct.reshape(ct.shape + (1,) * (x0.ndim - ct.ndim))
    return c0 * x0 + ct * x_t


def interleave(h: np.ndarray) -> np.ndarray:
    """[..., L, M] complex -> [..., 2*L*M] real."""
    stacked = np.stack([h.real, h.imag], axis=-1)
    return stacked.reshape(h.shape[:-2] + (-1,))


def deinterleave(x: np.ndarray, aps: int, antennas: int) -> np.ndarray:
    pairs = np.asarray(x).reshape(x.shape[:-1] + (aps, antennas, 2))
    return pairs[..., 0] + 1j * pairs[..., 1]


def nmse_loss(prediction, target, blocks: int = 1, reference=None, floor=0.0) -> Tensor:
    """Batch mean of ||pred - target||^2 / ||reference||^2.

    The last axis is split into ``blocks`` equal chunks (one per AP when
    ``blocks = L``) and each chunk is normalized separately, so every link
    counts equally as in the evaluation metric. ``reference`` defaults to the
    target itself; reference energies below ``floor`` are raised to it.
    """
    prediction, target = as_tensor(prediction), as_tensor(target)
    ref = target.data if reference is None else np.asarray(reference)
    shape = target.shape[:-1] + (blocks, -1)
    err = tsum(reshape(square(prediction - target), shape), axis=-1)
    ref = np.maximum(np.sum(ref.reshape(shape) ** 2, axis=-1), floor)
    return (err / ref).mean()


# model -------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    aps: int = 3
    antennas: int = 8
    steps: int = 50
    time_dim: int = 16
    hidden: tuple[int, ...] = (512, 512)
    conditioned: bool = True
    residual: bool = True
    gated: bool = True
    normalization: str = "noise"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    @property
    def signal_dim(self) -> int:
        return 2 * self.aps * self.antennas

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["encoder"]["conv_filters"] = list(self.encoder.conv_filters)
        d["encoder"]["reference_ap"] = list(self.encoder.reference_ap)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = dict(d["encoder"])
        enc["conv_filters"] = tuple(enc["conv_filters"])
        enc["reference_ap"] = tuple(enc["reference_ap"])
        rest = {k: v for k, v in d.items() if k != "encoder"}
        rest["hidden"] = tuple(rest["hidden"])
        return cls(encoder=EncoderConfig(**enc), **rest)


NORMALIZATIONS = ("noise", "global")


class DenoiserModel(Module):
    """Reverse-step MLP with optional cross-modal conditioning (CDDM) or none (TDDM)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator,
                 scale: float = 1.0, sensing_scale: float = 1.0, noise_power: float = 1.0):
        if cfg.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        self.cfg = cfg
        self.schedule = make_schedule(cfg.steps)
        self.time_embedding = Parameter(rng.uniform(-1.0, 1.0, (cfg.steps, cfg.time_dim)))
        self.encoder = ConditionEncoder(cfg.encoder, rng) if cfg.conditioned else None
        # a gated residual step also emits one gate logit per AP block
        out_dim = cfg.signal_dim + (cfg.aps if self.gated else 0)
        sizes = [cfg.signal_dim + cfg.time_dim + cfg.encoder.mmt_dim, *cfg.hidden, out_dim]
        self.mlp = MLP(sizes, rng)
        self.scale = float(scale)
        self.sensing_scale = float(sensing_scale)
        self.noise_power = float(noise_power)

    def row_scales(self, ls_noise_var: np.ndarray) -> np.ndarray:
        """Per-row divisor mapping raw channels to model units.

        ``ls_noise_var`` is the LS error variance per real dimension in raw
        units. Under ``"global"`` every row uses the dataset RMS scale. Under
        ``"noise"`` each row is scaled so its LS error variance becomes
        (1 - abar_T) / abar_T, which makes sqrt(abar_T) * LS carry exactly
        the noise level of the forward marginal at step T.
        """
        v = np.asarray(ls_noise_var, float)
        if self.cfg.normalization == "global":
            return np.full(v.shape, self.scale)
        abar_T = self.schedule.alpha_bar[-1]
        return np.sqrt(v * abar_T / (1.0 - abar_T))

    @property
    def conditioned(self) -> bool:
        return self.cfg.conditioned

    @property
    def gated(self) -> bool:
        return self.cfg.residual and self.cfg.gated

    def condition(self, planes, loc_features, batch: int) -> Tensor:
        """R_MMT for a batch; zeros for the unconditioned variant."""
        if self.encoder is None:
            return Tensor(np.zeros((batch, self.cfg.encoder.mmt_dim)))
        if planes is None or loc_features is None:
            raise ConditioningMissingError("conditioned model needs sensing estimates and UE locations")
        return self.encoder(planes, loc_features)

    def reverse_step(self, x_t, t, r_mmt) -> Tensor:
        """Predict x_{t-1} from x_t at steps ``t`` (1-based, one per row).

        With ``cfg.residual`` the MLP output is a correction added to x_t, so
        an all-zero MLP passes x_t through unchanged. A gated step also
        rescales each AP block of x_t by a gate, so per-link shrinkage is a
        single output rather than an exact cancellation of the block. The
        gate is
        ``g_max * sigmoid(z_l + c_t)`` with ``g_max = 1 / sqrt(alpha_t)``, the
        largest factor the exact posterior mean ever applies, and ``c_t``
        chosen so a zero logit gives 1. Bounding the gate keeps a drifting
        chain from amplifying itself step after step.
        """
        x_t = as_tensor(x_t)
        t = np.broadcast_to(np.asarray(t, int), (x_t.shape[0],))
        tau = getitem(self.time_embedding, t - 1)
        out = self.mlp(concat([x_t, tau, as_tensor(r_mmt)], axis=-1))
        if not self.cfg.residual:
            return out
        if not self.gated:
            return add(x_t, out)
        n, d, L = x_t.shape[0], self.cfg.signal_dim, self.cfg.aps
        delta = getitem(out, (slice(None), slice(0, d)))
        g_max = 1.0 / np.sqrt(self.schedule.alpha[t - 1])[:, None]
        logits = add(getitem(out, (slice(None), slice(d, d + L))), -np.log(g_max - 1.0))
        gate = mul(g_max, sigmoid(logits))
        scaled = mul(reshape(x_t, (n, L, -1)), reshape(gate, (n, L, 1)))
        return add(reshape(scaled, (n, d)), delta)


# item extraction -----------------------------------------------------------------

@dataclass
class TrainItems:
    """One row per (sample, UE): normalized true channel and its conditioning."""

    x0: np.ndarray          # [N, 2LM]
    ls: np.ndarray          # [N, 2LM] normalized LS estimate
    planes: np.ndarray      # [N, L_r, 2, M, M] normalized sensing estimate
    locations: np.ndarray   # [N, 4]
    sample_ids: np.ndarray
    ue_index: np.ndarray
    ls_noise_var: np.ndarray  # [N] per-entry LS error variance, normalized units

    def __len__(self):
        return len(self.x0)

    def take(self, idx) -> "TrainItems":
        return TrainItems(*(getattr(self, f.name)[idx] for f in dataclasses.fields(self)))


def ls_noise_variance(sample: Sample, noise_power: float) -> np.ndarray:
    """Per-UE LS error variance per real dimension, sigma^2 / (2 tau p_u)."""
    return noise_power / (sample.knobs.pilot_length * sample.powers) / 2.0


def build_items(samples: list[Sample], model: "DenoiserModel",
                reference=(0.0, 50.0)) -> TrainItems:
    """One item per (sample, UE), in the model's normalized units."""
    x0, ls, planes, locs, sids, ues, nv = [], [], [], [], [], [], []
    for s in samples:
        U = s.h_comm.shape[1]
        v = ls_noise_variance(s, model.noise_power)
        div = model.row_scales(v)[:, None]
        x0.append(interleave(np.transpose(s.h_comm, (1, 0, 2))) / div)
        ls.append(interleave(np.transpose(s.h_ls, (1, 0, 2))) / div)
        p = sensing_planes(s.h_sens_est / model.sensing_scale)
        planes.append(np.broadcast_to(p, (U,) + p.shape))
        locs.append(location_features(s.ue_positions, reference))
        sids.append(np.full(U, s.sample_id))
        ues.append(np.arange(U))
        nv.append(v / div[:, 0] ** 2)
    return TrainItems(np.concatenate(x0), np.concatenate(ls), np.concatenate(planes),
                      np.concatenate(locs), np.concatenate(sids), np.concatenate(ues),
                      np.concatenate(nv))


# training ------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    decay_factor: float = 0.5
    patience: int = 5
    min_learning_rate: float = 1e-6
    seed: int = 0
    target: str = "posterior"
    loss: str = "link"
    link_floor: float = 0.001


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def _chain_pair(x0: np.ndarray, t: np.ndarray, schedule: DiffusionSchedule,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(x_{t-1}, x_t) drawn jointly from one forward chain."""
    x_prev = forward_sample(x0, t - 1, schedule, rng)
    return x_prev, forward_step(x_prev, t, schedule, rng)


TARGETS = ("posterior", "sample")
LOSSES = ("link", "row")


def _batch_loss(model: DenoiserModel, items: TrainItems, rng: np.random.Generator,
                target: str = "posterior", loss: str = "link",
                link_floor: float = 0.001) -> Tensor:
    n = len(items)
    t = rng.integers(1, model.schedule.steps + 1, size=n)
    x_prev, x_t = _chain_pair(items.x0, t, model.schedule, rng)
    if target == "posterior":
        x_prev = posterior_mean(items.x0, x_t, t, model.schedule)
    r = model.condition(items.planes, items.locations, n)
    if loss == "link":
        # floor: a fraction of the LS noise energy of one link block
        floor = link_floor * 2 * model.cfg.antennas * items.ls_noise_var[:, None]
        return nmse_loss(model.reverse_step(x_t, t, r), x_prev, model.cfg.aps, items.x0, floor)
    return nmse_loss(model.reverse_step(x_t, t, r), x_prev)


def evaluate_loss(model: DenoiserModel, items: TrainItems, seed: int, batch_size: int = 256,
                  target: str = "posterior", loss: str = "link", link_floor: float = 0.001) -> float:
    """Mean objective with a fixed noise stream, model in eval mode."""
    rng = np.random.default_rng(seed)
    model.eval()
    total = 0.0
    for start in range(0, len(items), batch_size):
        chunk = items.take(slice(start, start + batch_size))
        total += _batch_loss(model, chunk, rng, target, loss, link_floor).data * len(chunk)
    model.train()
    return float(total / len(items))


def train(model: DenoiserModel, train_items: TrainItems, val_items: TrainItems,
          cfg: TrainConfig, optimizer: OptimizerState | None = None,
          on_epoch=None) -> tuple[OptimizerState, list[EpochRecord]]:
    """RMSprop on the NMSE objective with plateau-halving learning rate."""
    if cfg.target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}")
    if cfg.loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}")
    if len(train_items) == 0 or len(val_items) == 0:
        raise ValueError("training needs non-empty training and validation items")
    if optimizer is None:
        optimizer = OptimizerState(cfg.learning_rate, cfg.decay_factor, cfg.patience)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    named = list(model.named_parameters())
    history: list[EpochRecord] = []
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_items))
        losses, weights = [], []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            model.zero_grad()
            loss = _batch_loss(model, train_items.take(idx), rng, cfg.target, cfg.loss, cfg.link_floor)
            if not math.isfinite(float(loss.data)):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            rmsprop_step(named, optimizer.learning_rate, optimizer.rho, optimizer.eps)
            losses.append(float(loss.data))
            weights.append(len(idx))
        train_loss = float(np.average(losses, weights=weights))
        val_loss = evaluate_loss(model, val_items, seed=cfg.seed + 7919,
                                 target=cfg.target, loss=cfg.loss,
                                 link_floor=cfg.link_floor)
        history.append(EpochRecord(epoch, train_loss, val_loss, optimizer.learning_rate))
        log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss, val_loss,
                 optimizer.learning_rate)
        if on_epoch is not None:
            on_epoch(history[-1])
        optimizer.observe(val_loss)
        if optimizer.learning_rate < cfg.min_learning_rate:
            break
    return optimizer, history


def new_model(dataset: Dataset, steps: int, conditioned: bool, seed: int,
              **overrides) -> DenoiserModel:
    sc = dataset.manifest.scenario
    enc = overrides.pop("encoder", None) or EncoderConfig()
    enc = dataclasses.replace(enc, receive_aps=sc.num_receive_aps, antennas=sc.antennas,
                              reference_ap=tuple(sc.tx_ap_position))
    cfg = ModelConfig(aps=sc.num_aps, antennas=sc.antennas, steps=steps,
                      conditioned=conditioned, encoder=enc, **overrides)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    return DenoiserModel(cfg, rng, dataset.manifest.normalization_scale,
                         dataset.manifest.sensing_scale, sc.noise_power)


def items_for_split(model: DenoiserModel, dataset: Dataset, split: str) -> TrainItems:
    sc = dataset.manifest.scenario
    return build_items(dataset.split(split), model, sc.tx_ap_position)


# inference -----------------------------------------------------------------------

def matched_start_steps(schedule: DiffusionSchedule, noise_var: np.ndarray) -> np.ndarray:
    """Step whose forward marginal best matches an input with error variance ``noise_var``.

    Scaling the input by sqrt(abar) leaves noise abar*v; equating with
    1 - abar gives abar = 1 / (1 + v).
    """
    target = 1.0 / (1.0 + np.asarray(noise_var, float))
    return np.argmin(np.abs(schedule.alpha_bar[None, :] - target[:, None]), axis=1) + 1


def denoise_normalized(model: DenoiserModel, ls: np.ndarray, planes=None, locations=None,
                       start_steps=None) -> np.ndarray:
    """Run the reverse chain on normalized LS rows [B, 2LM]; returns normalized x_0."""
    ls = np.atleast_2d(ls)
    B = ls.shape[0]
    T = model.schedule.steps
    start = np.full(B, T) if start_steps is None else np.broadcast_to(np.asarray(start_steps, int), (B,))
    if np.any(start < 1) or np.any(start > T):
        raise IndexError(f"start step outside 1..{T}")
    model.eval()
    r = model.condition(planes, locations, B).data
    x = np.sqrt(model.schedule.alpha_bar[start - 1])[:, None] * ls
    for t in range(int(start.max()), 0, -1):
        active = start >= t
        pred = model.reverse_step(x[active], t, r[active]).data
        x[active] = pred
    model.train()
    return x


def denoise(model: DenoiserModel, h_ls: np.ndarray, noise_var, h_sens_est=None, ue_xy=None,
            start_step=None) -> np.ndarray:
    """Refine LS estimates [B, L, M] (or one [L, M]) back to complex channels.

    ``noise_var`` is the LS error variance per real dimension in raw units,
    one value per row or a scalar; it sets the per-row normalization and the
    matched start. ``start_step`` is an int, ``None`` (start at T) or
    ``"matched"``.
    """
    single = h_ls.ndim == 2
    h_ls = h_ls[None] if single else h_ls
    B, L, M = h_ls.shape
    noise_var = np.broadcast_to(np.asarray(noise_var, float), (B,))
    planes = locs = None
    if model.conditioned:
        if h_sens_est is None or ue_xy is None:
            raise ConditioningMissingError("conditioned model needs sensing estimates and UE locations")
        h_sens_est = np.asarray(h_sens_est)
        if h_sens_est.ndim == 3:
            h_sens_est = np.broadcast_to(h_sens_est, (B,) + h_sens_est.shape)
        planes = sensing_planes(h_sens_est / model.sensing_scale)
        locs = location_features(np.reshape(ue_xy, (B, 2)), model.cfg.encoder.reference_ap)
    div = model.row_scales(noise_var)[:, None]
    if isinstance(start_step, str):
        if start_step != "matched":
            raise ValueError(f"unknown start_step {start_step!r}")
        start_step = matched_start_steps(model.schedule, noise_var / div[:, 0] ** 2)
    x0 = denoise_normalized(model, interleave(h_ls) / div, planes, locs, start_step)
    out = deinterleave(x0 * div, L, M)
    return out[0] if single else out


def denoise_sample(model: DenoiserModel, sample: Sample, start_step=None) -> np.ndarray:
    """Denoised [L, U, M] channel for every UE of one sample."""
    h_ls = np.transpose(sample.h_ls, (1, 0, 2))
    out = denoise(model, h_ls, ls_noise_variance(sample, model.noise_power),
                  sample.h_sens_est, sample.ue_positions, start_step)
    return np.transpose(out, (1, 0, 2))


# checkpoints ---------------------------------------------------------------------

def save_model(path, model: DenoiserModel, optimizer: OptimizerState | None = None,
               scenario: dict | None = None, extra: dict | None = None) -> None:
    arrays = {f"param/{k}": p.data for k, p in model.named_parameters()}
    arrays.update({f"buffer/{k}": v for k, v in model.named_buffers()})
    arrays.update({f"rmsprop/{k}": p.accumulator for k, p in model.named_parameters()})
    meta = {
        "model": model.cfg.to_dict(),
        "normalization_scale": model.scale,
        "sensing_scale": model.sensing_scale,
        "noise_power": model.noise_power,
        "schedule": {"alpha_start": ALPHA_START, "alpha_end": ALPHA_END, "steps": model.cfg.steps},
        "batchnorm": {"eps": BN_EPS, "momentum": BN_MOMENTUM},
        "optimizer": dataclasses.asdict(optimizer) if optimizer else None,
        "scenario": scenario,
        "extra": extra or {},
    }
    write_checkpoint(path, arrays, meta)


def load_model(path) -> tuple[DenoiserModel, OptimizerState | None, dict]:
    arrays, meta = read_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model"])
    model = DenoiserModel(cfg, np.random.default_rng(0), meta["normalization_scale"],
                          meta["sensing_scale"], meta["noise_power"])
    for k, p in model.named_parameters():
        p.data[...] = arrays[f"param/{k}"]
        p.accumulator[...] = arrays[f"rmsprop/{k}"]
    for k, buf in model.named_buffers():
        buf[...] = arrays[f"buffer/{k}"]
    opt = OptimizerState(**meta["optimizer"]) if meta.get("optimizer") else None
    return model, opt, meta
