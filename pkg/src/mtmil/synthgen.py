"""Synthetic cohorts with planted morphology programs.

Each bag has a set of active latent programs.  A target is positive when any
of its programs is active (noisy-OR, optionally with label flips), and every
active program leaves a direction in the tumor tiles of the bag.  Targets
that share programs therefore share visual evidence, which is what lets a
multi-task model transfer from common to rare targets.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields
from datetime import date, timedelta
from typing import Optional

import numpy as np

from .errors import ConfigError, GenerationError, MissingTruth
from .feature_store import TUMOR, CohortManifest, FeatureBag, ManifestRow

MAX_TRIES = 10_000
MAX_ABS_COS = 0.3
START_DATE = date(2019, 1, 1)
SPAN_DAYS = 4 * 365

SCANNERS = ("scanner_a", "scanner_b")
METASTATIC_SITES = ("liver", "lymph_node")
PROCEDURES = ("resection", "biopsy")

# Eight targets on eight programs; with no label noise the prevalences are
# 0.40, 0.30, 0.20, 0.12, 0.08, 0.05, 0.03, 0.02.  The rare targets T5..T7
# live entirely inside the programs of the common targets T0 and T1.
DEFAULT_TARGETS = (
    ("T0", (0, 1, 2, 7)),
    ("T1", (3, 4)),
    ("T2", (5,)),
    ("T3", (6,)),
    ("T4", (2,)),
    ("T5", (3,)),
    ("T6", (1,)),
    ("T7", (0,)),
)
DEFAULT_ACTIVITY = (
    0.02,
    0.03,
    0.08,
    0.05,
    1 - 0.70 / 0.95,
    0.20,
    0.12,
    1 - 0.60 / (0.98 * 0.97 * 0.92),
)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_bags: int = 2778
    dim: int = 64
    targets: tuple = DEFAULT_TARGETS
    n_programs: int = 8
    program_activity: tuple = DEFAULT_ACTIVITY
    label_noise: float = 0.0
    tiles_min: int = 48
    tiles_max: int = 160
    tumor_fraction_mean: float = 0.35
    signal_amplitude: float = 1.5
    noise_sigma: float = 1.0
    external_fraction: float = 0.1
    stain_shift_magnitude: float = 0.5
    grade_effect: float = 1.5
    site_effect: float = 1.5
    class_offset: float = 5.0
    cohort_id: str = "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple((str(t), tuple(int(p) for p in ps)) for t, ps in self.targets))
        object.__setattr__(self, "program_activity", tuple(float(q) for q in self.program_activity))
        self.validate()

    def validate(self):
        if self.n_bags < 0 or self.dim < 1 or self.n_programs < 1:
            raise ConfigError("n_bags >= 0, dim >= 1 and n_programs >= 1 required")
        if len(self.program_activity) != self.n_programs:
            raise ConfigError("program_activity needs one entry per program")
        if not all(0 < q < 1 for q in self.program_activity):
            raise ConfigError("program activities must lie in (0, 1)")
        if not self.targets:
            raise ConfigError("at least one target required")
        ids = [t for t, _ in self.targets]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate target ids")
        for t, programs in self.targets:
            if not programs or any(not 0 <= p < self.n_programs for p in programs):
                raise ConfigError(f"target {t} must reference at least one valid program")
        if not 0 <= self.label_noise < 0.5:
            raise ConfigError("label_noise must lie in [0, 0.5)")
        if self.tiles_min < 2 or self.tiles_min > self.tiles_max:
            raise ConfigError("need 2 <= tiles_min <= tiles_max")
        if not 0 < self.tumor_fraction_mean < 1:
            raise ConfigError("tumor_fraction_mean must lie in (0, 1)")
        if self.signal_amplitude <= 0 or self.noise_sigma <= 0:
            raise ConfigError("signal_amplitude and noise_sigma must be positive")
        if not 0 <= self.external_fraction < 1:
            raise ConfigError("external_fraction must lie in [0, 1)")
        if self.stain_shift_magnitude < 0 or self.class_offset < 0:
            raise ConfigError("stain_shift_magnitude and class_offset must be nonnegative")

    @property
    def target_ids(self) -> tuple:
        return tuple(t for t, _ in self.targets)

    @classmethod
    def from_mapping(cls, values: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        values = dict(values)
        if isinstance(values.get("targets"), dict):
            values["targets"] = tuple(values["targets"].items())
        return cls(**values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = {t: list(ps) for t, ps in self.targets}
        d["program_activity"] = list(self.program_activity)
        return d


def _rng(seed: int, index: int, tag: str) -> np.random.Generator:
    return np.random.default_rng([seed, index, zlib.crc32(tag.encode())])


def _directions(config: SynthConfig) -> dict:
    """Program, grade and site directions (mutually near-orthogonal) plus class offsets and stain shift."""
    rng = _rng(config.seed, 0, "directions")
    want = config.n_programs + 2
    accepted = []
    tries = 0
    while len(accepted) < want:
        if tries >= MAX_TRIES:
            raise GenerationError(f"could not place {want} directions with |cos| <= {MAX_ABS_COS} in dim {config.dim}")
        tries += 1
        v = rng.standard_normal(config.dim)
        norm = np.linalg.norm(v)
        if norm == 0:
            continue
        v /= norm
        if all(abs(v @ u) <= MAX_ABS_COS for u in accepted):
            accepted.append(v)
    offsets = rng.standard_normal((6, config.dim))
    offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
    offsets *= config.class_offset
    offsets[TUMOR] = 0.0
    shift = rng.standard_normal(config.dim)
    shift *= config.stain_shift_magnitude / np.linalg.norm(shift)
    return {
        "programs": np.array(accepted[: config.n_programs]),
        "grade": accepted[-2],
        "site": accepted[-1],
        "offsets": offsets,
        "shift": shift,
    }


def _program_activations(config: SynthConfig, index: int) -> np.ndarray:
    rng = _rng(config.seed, index, "programs")
    return rng.random(config.n_programs) < np.asarray(config.program_activity)


def _labels(config: SynthConfig, index: int, active: np.ndarray) -> tuple:
    flips = _rng(config.seed, index, "label_noise").random(len(config.targets)) < config.label_noise
    out = []
    for (_, programs), flip in zip(config.targets, flips):
        y = int(active[list(programs)].any())
        out.append(1 - y if flip else y)
    return tuple(out)


def _external_set(config: SynthConfig) -> set:
    n_ext = int(round(config.external_fraction * config.n_bags))
    order = _rng(config.seed, 0, "external").permutation(config.n_bags)
    return set(order[:n_ext].tolist())


def bag_id_for(index: int) -> str:
    return f"bag{index:06d}"


def _make_bag(config: SynthConfig, index: int, dirs: dict, external: bool):
    active = _program_activations(config, index)
    labels = _labels(config, index, active)
    meta_rng = _rng(config.seed, index, "meta")
    high_grade = bool(meta_rng.random() < 0.5)
    primary = bool(meta_rng.random() < 0.5)
    timestamp = START_DATE + timedelta(days=int(meta_rng.integers(0, SPAN_DAYS + 1)))
    scanner = SCANNERS[int(meta_rng.integers(len(SCANNERS)))]
    site = "primary" if primary else METASTATIC_SITES[int(meta_rng.integers(len(METASTATIC_SITES)))]
    procedure = PROCEDURES[int(meta_rng.integers(len(PROCEDURES)))]

    layout_rng = _rng(config.seed, index, "layout")
    n = int(layout_rng.integers(config.tiles_min, config.tiles_max + 1))
    conc = 10.0
    frac = layout_rng.beta(config.tumor_fraction_mean * conc, (1 - config.tumor_fraction_mean) * conc)
    n_tumor = int(np.clip(layout_rng.binomial(n, frac), 1, n - 1))

    # tiles occupy a random subset of a square grid, in row-major order; the
    # tumor region is the blob of cells nearest a random center
    side = int(np.ceil(np.sqrt(n)))
    cells = np.sort(layout_rng.choice(side * side, size=n, replace=False))
    coords = np.stack([cells % side, cells // side], axis=1)
    center = layout_rng.uniform(0, side, size=2)
    dist = np.sum((coords + 0.5 - center) ** 2, axis=1)
    tumor_idx = np.argsort(dist, kind="stable")[:n_tumor]
    tile_class = layout_rng.integers(1, 6, size=n)
    tile_class[tumor_idx] = TUMOR

    noise_rng = _rng(config.seed, index, "noise")
    feats = noise_rng.standard_normal((n, config.dim)) * config.noise_sigma
    feats += dirs["offsets"][tile_class]
    signal = dirs["programs"][active].sum(axis=0) if active.any() else np.zeros(config.dim)
    norm = np.linalg.norm(signal)
    if norm > 0:
        signal = signal / norm
    tumor_vec = (
        config.signal_amplitude * signal
        + config.grade_effect * (1.0 if high_grade else -1.0) * dirs["grade"]
        + config.site_effect * (1.0 if primary else -1.0) * dirs["site"]
    )
    is_tumor = tile_class == TUMOR
    feats[is_tumor] += tumor_vec
    if external:
        feats += dirs["shift"]

    bag_id = bag_id_for(index)
    bag = FeatureBag(
        bag_id,
        feats.astype(np.float32),
        tile_coords=coords.astype(np.uint32),
        tile_class=tile_class.astype(np.uint8),
        tile_tumor_label=is_tumor.astype(np.uint8),
    )
    row = ManifestRow(
        bag_id=bag_id,
        cohort_id=config.cohort_id,
        timestamp=timestamp,
        stain_origin="external" if external else "internal",
        scanner=scanner,
        tissue_site=site,
        procedure=procedure,
        grade="high" if high_grade else "low",
        is_primary_site=primary,
        labels=labels,
    )
    return bag, row


def generate_cohort(config: SynthConfig) -> tuple:
    """Generate ``config.n_bags`` bags and their manifest; deterministic in ``config``."""
    config.validate()
    dirs = _directions(config)
    external = _external_set(config)
    bags, rows = [], []
    for i in range(config.n_bags):
        bag, row = _make_bag(config, i, dirs, i in external)
        bags.append(bag)
        rows.append(row)
    return bags, CohortManifest(config.target_ids, rows)


@dataclass(frozen=True)
class BagTruth:
    bag_id: str
    tile_class: np.ndarray
    tumor: np.ndarray
    programs: Optional[np.ndarray] = field(default=None)

    @property
    def n_tumor(self) -> int:
        return int(self.tumor.sum())


def planted_truth(bags, config: Optional[SynthConfig] = None) -> dict:
    """Per-bag tile classes and tumor flags in tile order.

    With ``config`` the latent program activations are recovered as well,
    since they come from the same keyed random stream as generation.
    """
    out = {}
    for bag in bags:
        if bag.tile_class is None:
            raise MissingTruth(f"{bag.bag_id} carries no planted tile classes")
        tumor = bag.tile_tumor_label if bag.tile_tumor_label is not None else bag.tile_class == TUMOR
        programs = None
        if config is not None:
            try:
                index = int(bag.bag_id[3:])
            except ValueError:
                raise MissingTruth(f"{bag.bag_id} is not a generated bag id") from None
            programs = _program_activations(config, index)
        out[bag.bag_id] = BagTruth(bag.bag_id, bag.tile_class.copy(), np.asarray(tumor, dtype=bool), programs)
    return out
