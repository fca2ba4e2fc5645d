"""Deterministic dataset generation, storage and splitting.

A dataset directory holds ``dataset.manifest`` (``key = value`` text) and
``dataset.bin``. The binary file is::

    b"ISACDATA" uint32 version, uint64 sample count
    per sample: int64 sample_id, then every field of ``SAMPLE_FIELDS`` as
        int64 ndim, int64 is_complex, int64 dims[ndim], float64 values

All integers and floats are little-endian; complex arrays store interleaved
(re, im) pairs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import (
    ScenarioKnobs,
    draw_realization,
    radar_probe,
    received_pilots,
    received_radar,
)
from .config import ScenarioConfig
from .estimators import ls_estimate, sensing_ls

FORMAT_VERSION = 1
MAGIC = b"ISACDATA"
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)
SPLIT_NAMES = ("train", "val", "test")

SAMPLE_FIELDS = (
    "knobs", "h_comm", "y_pilot", "h_ls", "h_sens_est", "ue_positions",
    "target_position", "ap_positions", "pilot_assignment", "powers", "large_scale",
)


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    sample_id: int
    knobs: ScenarioKnobs
    h_comm: np.ndarray         # [L, U, M] true channel
    y_pilot: np.ndarray        # [L, tau_p, M]
    h_ls: np.ndarray           # [L, U, M]
    h_sens_est: np.ndarray     # [L_r, M, M]
    ue_positions: np.ndarray   # [U, 2]
    target_position: np.ndarray
    ap_positions: np.ndarray   # [L, 2], transmitting AP first
    pilot_assignment: np.ndarray
    powers: np.ndarray
    large_scale: np.ndarray    # [L, U]

    def field_array(self, name: str) -> np.ndarray:
        if name == "knobs":
            return self.knobs.as_array()
        return getattr(self, name)


@dataclass
class DatasetManifest:
    root_seed: int
    n_samples: int
    splits: dict[str, list[int]]
    normalization_scale: float
    sensing_scale: float
    scenario: ScenarioConfig
    format_version: int = FORMAT_VERSION
    bin_sha256: str = ""

    @property
    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}


@dataclass
class Dataset:
    manifest: DatasetManifest
    samples: list[Sample] = field(default_factory=list)

    def split(self, name: str) -> list[Sample]:
        ids = set(self.manifest.splits[name])
        return [s for s in self.samples if s.sample_id in ids]


def draw_knobs(config: ScenarioConfig, rng: np.random.Generator) -> ScenarioKnobs:
    lo, hi = config.num_ues
    return ScenarioKnobs(
        num_ues=int(rng.integers(lo, hi + 1)),
        pilot_length=int(config.pilot_lengths[rng.integers(len(config.pilot_lengths))]),
        distance=float(rng.uniform(*config.target_distance)),
        snr_db=float(rng.uniform(*config.snr_db)),
    )


def sample_rng(root_seed: int, sample_id: int) -> np.random.Generator:
    """Independent stream per sample, derived from (root seed, sample index)."""
    return np.random.default_rng(np.random.SeedSequence([root_seed, sample_id]))


def simulate_sample(config: ScenarioConfig, sample_id: int, root_seed: int,
                    knobs: ScenarioKnobs | None = None) -> tuple[Sample, object]:
    """Draw one scenario and everything the receivers estimate from it.

    Returns the stored :class:`Sample` and the underlying realization.
    """
    rng = sample_rng(root_seed, sample_id)
    if knobs is None:
        knobs = draw_knobs(config, rng)
    real = draw_realization(config, knobs, rng)
    obs = received_pilots(real, config.noise_power, rng)
    h_ls = ls_estimate(obs.y_pilot, real.pilot_assignment, real.powers, knobs.pilot_length)
    probe = radar_probe(config.antennas, config.radar_snapshots)
    echoes = received_radar(real, probe, config.noise_power, rng)
    h_sens_est = np.stack([sensing_ls(y, probe) for y in echoes])
    sample = Sample(
        sample_id=sample_id, knobs=knobs, h_comm=real.h_comm, y_pilot=obs.y_pilot,
        h_ls=h_ls, h_sens_est=h_sens_est, ue_positions=real.geometry.ue_positions,
        target_position=real.geometry.target_position,
        ap_positions=real.geometry.ap_positions, pilot_assignment=real.pilot_assignment,
        powers=real.powers, large_scale=real.large_scale,
    )
    return sample, real


def split_ids(n_samples: int, root_seed: int) -> dict[str, list[int]]:
    """Seeded shuffle, then contiguous 60/20/20 blocks."""
    perm = np.random.default_rng(np.random.SeedSequence([root_seed, 0x5711, n_samples])).permutation(n_samples)
    n_train = int(round(SPLIT_FRACTIONS[0] * n_samples))
    n_val = int(round(SPLIT_FRACTIONS[1] * n_samples))
    blocks = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return {name: sorted(int(i) for i in block) for name, block in zip(SPLIT_NAMES, blocks)}


def rms_scale(arrays) -> float:
    """RMS over every real and imaginary entry."""
    total = 0.0
    count = 0
    for a in arrays:
        total += float(np.sum(np.abs(a) ** 2))
        count += 2 * a.size if np.iscomplexobj(a) else a.size
    if count == 0:
        raise DatasetError("normalization needs a non-empty training split")
    if total == 0.0:
        raise DatasetError("training data is identically zero; normalization undefined")
    return float(np.sqrt(total / count))


def normalization_scale(train_samples: list[Sample]) -> float:
    return rms_scale(s.h_comm for s in train_samples)


def sensing_scale(train_samples: list[Sample]) -> float:
    return rms_scale(s.h_sens_est for s in train_samples)


def generate_dataset(config: ScenarioConfig, n_samples: int, root_seed: int | None = None) -> Dataset:
    if n_samples < 10:
        raise DatasetError("need at least 10 samples for a 60/20/20 split")
    root_seed = config.seed if root_seed is None else root_seed
    samples = [simulate_sample(config, i, root_seed)[0] for i in range(n_samples)]
    splits = split_ids(n_samples, root_seed)
    train = [samples[i] for i in splits["train"]]
    manifest = DatasetManifest(
        root_seed=root_seed, n_samples=n_samples, splits=splits,
        normalization_scale=normalization_scale(train), sensing_scale=sensing_scale(train),
        scenario=config.replace(seed=root_seed),
    )
    return Dataset(manifest, samples)


# serialization ----------------------------------------------------------------

def _write_array(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    is_complex = np.iscomplexobj(arr)
    fh.write(struct.pack("<qq", arr.ndim, int(is_complex)))
    fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
    if is_complex:
        flat = np.empty(arr.size * 2, "<f8")
        flat[0::2] = arr.real.ravel()
        flat[1::2] = arr.imag.ravel()
    else:
        flat = np.ascontiguousarray(arr, "<f8").ravel()
    fh.write(flat.tobytes())


def _read_array(buf: memoryview, pos: int) -> tuple[np.ndarray, int]:
    ndim, is_complex = struct.unpack_from("<qq", buf, pos)
    pos += 16
    shape = struct.unpack_from(f"<{ndim}q", buf, pos)
    pos += 8 * ndim
    size = int(np.prod(shape, dtype=np.int64)) * (2 if is_complex else 1)
    flat = np.frombuffer(buf, "<f8", size, pos).astype(np.float64)
    pos += 8 * size
    if is_complex:
        arr = (flat[0::2] + 1j * flat[1::2]).reshape(shape)
    else:
        arr = flat.reshape(shape)
    return arr, pos


def encode_samples(samples: list[Sample]) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<IQ", FORMAT_VERSION, len(samples)))
    for s in samples:
        fh.write(struct.pack("<q", s.sample_id))
        for name in SAMPLE_FIELDS:
            _write_array(fh, s.field_array(name))
    return fh.getvalue()


def decode_samples(raw: bytes) -> list[Sample]:
    if raw[:8] != MAGIC:
        raise DatasetError("not a dataset binary (bad magic)")
    version, count = struct.unpack_from("<IQ", raw, 8)
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version {version}")
    buf = memoryview(raw)
    pos = 8 + struct.calcsize("<IQ")
    samples = []
    for _ in range(count):
        (sample_id,) = struct.unpack_from("<q", buf, pos)
        pos += 8
        values = {}
        for name in SAMPLE_FIELDS:
            values[name], pos = _read_array(buf, pos)
        values["knobs"] = ScenarioKnobs.from_array(values["knobs"])
        values["pilot_assignment"] = values["pilot_assignment"].astype(int)
        samples.append(Sample(sample_id=sample_id, **values))
    return samples


def _manifest_text(m: DatasetManifest) -> str:
    lines = [
        f"format_version = {m.format_version}",
        f"root_seed = {m.root_seed}",
        f"n_samples = {m.n_samples}",
    ]
    for name in SPLIT_NAMES:
        lines.append(f"count.{name} = {len(m.splits[name])}")
    lines.append(f"normalization_scale = {m.normalization_scale!r}")
    lines.append(f"sensing_scale = {m.sensing_scale!r}")
    lines.append(f"bin_sha256 = {m.bin_sha256}")
    for name in SPLIT_NAMES:
        lines.append(f"split.{name} = " + ",".join(str(i) for i in m.splits[name]))
    for key, value in m.scenario.to_dict().items():
        if isinstance(value, list):
            value = ",".join(repr(v) for v in value)
        else:
            value = repr(value)
        lines.append(f"scenario.{key} = {value}")
    return "\n".join(lines) + "\n"


def _parse_manifest(text: str) -> DatasetManifest:
    values: dict[str, str] = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
    version = int(values.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported or missing manifest format_version: {version}")
    scenario = {k[len("scenario."):]: (v.split(",") if "," in v else v)
                for k, v in values.items() if k.startswith("scenario.")}
    splits = {name: [int(i) for i in values[f"split.{name}"].split(",") if i]
              for name in SPLIT_NAMES}
    return DatasetManifest(
        root_seed=int(values["root_seed"]), n_samples=int(values["n_samples"]), splits=splits,
        normalization_scale=float(values["normalization_scale"]),
        sensing_scale=float(values["sensing_scale"]),
        scenario=ScenarioConfig.from_dict(scenario), format_version=version,
        bin_sha256=values.get("bin_sha256", ""),
    )


def save_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        raw = encode_samples(dataset.samples)
        manifest = dataclasses.replace(dataset.manifest, bin_sha256=hashlib.sha256(raw).hexdigest())
        (directory / "dataset.bin").write_bytes(raw)
        (directory / "dataset.manifest").write_text(_manifest_text(manifest))
    except OSError as exc:
        raise OSError(f"cannot write dataset to {directory}: {exc}") from exc
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / "dataset.manifest"
    bin_path = directory / "dataset.bin"
    for p in (manifest_path, bin_path):
        if not p.is_file():
            raise FileNotFoundError(f"dataset file not found: {p}")
    manifest = _parse_manifest(manifest_path.read_text())
    raw = bin_path.read_bytes()
    if manifest.bin_sha256 and hashlib.sha256(raw).hexdigest() != manifest.bin_sha256:
        raise DatasetError(f"{bin_path}: checksum does not match manifest")
    return Dataset(manifest, decode_samples(raw))
