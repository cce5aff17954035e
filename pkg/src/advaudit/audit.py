"""Perturbation-budget accounting and verification.

Everything here measures in float64, and the file-level audit recomputes
all norms from the raw image sidecars on disk; it never trusts the attack
code's own records. A campaign directory passes only if every measured
L-infinity distance to the pristine original respects the declared budget.

Tolerance note: images are stored in float32, so a single arithmetic step
can shift a stored value by one float32 ulp at magnitude ~1. The default
budget tolerance is therefore 4 float32 ulps (about 4.8e-7).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .diffcore import ULP32

DEFAULT_TOLERANCE = 4 * ULP32

ORIGINALS_DIR = os.path.join("images", "originals")
FINAL_DIR = os.path.join("images", "final")


def round_dir(n: int) -> str:
    return os.path.join("images", f"round_{n:03d}")


def sample_name(sample_id: int) -> str:
    return f"sample_{sample_id:05d}"


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def _pair(original, perturbed):
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(perturbed, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def linf(original, perturbed) -> float:
    """Max absolute coordinate difference, in 64-bit."""
    a, b = _pair(original, perturbed)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(b - a)))


def l2(original, perturbed) -> float:
    a, b = _pair(original, perturbed)
    return float(np.sqrt(np.sum((b - a) ** 2)))


# ---------------------------------------------------------------------------
# ledger
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LedgerEntry:
    sample_id: int
    round: int
    linf: float
    l2: float
    success: bool


CSV_COLUMNS = ("sample_id", "round", "linf", "l2", "success")


class PerturbationLedger:
    """Per-sample, per-round distances to the pristine originals."""

    def __init__(self, epsilon: float, mode: str = "", seed: int = 0):
        if epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {epsilon}")
        self.epsilon = float(epsilon)
        self.mode = mode
        self.seed = int(seed)
        self.entries: list[LedgerEntry] = []
        self._keys: set[tuple[int, int]] = set()

    def add(self, sample_id: int, round: int, linf_value: float, l2_value: float,
            success: bool):
        sample_id, round = int(sample_id), int(round)
        if sample_id < 0:
            raise ValueError(f"sample id must be >= 0, got {sample_id}")
        if round < 1:
            raise ValueError(f"rounds are 1-based, got {round}")
        if (sample_id, round) in self._keys:
            raise ValueError(f"duplicate ledger entry for sample {sample_id}, round {round}")
        # campaigns may run with widened pixel clamps, so linf can pass 1
        if not (np.isfinite(linf_value) and linf_value >= 0.0):
            raise ValueError(f"linf must be finite and >= 0, got {linf_value} "
                             f"(sample {sample_id}, round {round})")
        if l2_value < 0:
            raise ValueError(f"negative l2 {l2_value}")
        self._keys.add((sample_id, round))
        self.entries.append(LedgerEntry(sample_id, round, float(linf_value),
                                        float(l2_value), bool(success)))

    def __len__(self):
        return len(self.entries)

    @property
    def num_rounds(self) -> int:
        return max((e.round for e in self.entries), default=0)

    def sample_ids(self) -> list[int]:
        return sorted({e.sample_id for e in self.entries})

    def by_round(self, round: int) -> list[LedgerEntry]:
        return [e for e in self.entries if e.round == round]

    def max_linf_by_round(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for e in self.entries:
            out[e.round] = max(out.get(e.round, 0.0), e.linf)
        return dict(sorted(out.items()))

    def validate(self):
        """Every sample must cover rounds 1..num_rounds with no gaps."""
        if not self.entries:
            raise ValueError("ledger is empty")
        want = set(range(1, self.num_rounds + 1))
        per_sample: dict[int, set] = {}
        for e in self.entries:
            per_sample.setdefault(e.sample_id, set()).add(e.round)
        for sid, rounds in sorted(per_sample.items()):
            if rounds != want:
                missing = sorted(want - rounds)
                raise ValueError(f"sample {sid} missing rounds {missing}")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for e in sorted(self.entries, key=lambda e: (e.round, e.sample_id)):
                writer.writerow([e.sample_id, e.round, repr(e.linf), repr(e.l2),
                                 int(e.success)])

    @classmethod
    def from_csv(cls, path, epsilon: float, mode: str = "", seed: int = 0):
        ledger = cls(epsilon, mode=mode, seed=seed)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != list(CSV_COLUMNS):
                raise ValueError(f"{path}: expected header {','.join(CSV_COLUMNS)}, "
                                 f"got {header}")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 5:
                    raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
                try:
                    ledger.add(int(row[0]), int(row[1]), float(row[2]), float(row[3]),
                               bool(int(row[4])))
                except ValueError as err:
                    raise ValueError(f"{path}:{lineno}: {err}") from None
        return ledger


# ---------------------------------------------------------------------------
# reports and checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoundReport:
    round: int
    max_linf: float
    mean_linf: float
    success_rate: float
    violations: int

    def to_dict(self) -> dict:
        return {"round": self.round, "max_linf": self.max_linf,
                "mean_linf": self.mean_linf, "success_rate": self.success_rate,
                "violations": self.violations}


@dataclass(frozen=True)
class Violation:
    sample_id: int
    round: int
    linf: float
    epsilon: float

    @property
    def factor(self) -> float:
        return self.linf / self.epsilon if self.epsilon > 0 else float("inf")

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "round": self.round,
                "linf": self.linf, "epsilon": self.epsilon, "factor": self.factor}


def round_report(entries, round: int, epsilon: float,
                 tolerance: float = DEFAULT_TOLERANCE) -> RoundReport:
    values = [e.linf for e in entries]
    if not values:
        raise ValueError(f"no entries for round {round}")
    return RoundReport(
        round=round,
        max_linf=max(values),
        mean_linf=float(np.mean(values)),
        success_rate=float(np.mean([e.success for e in entries])),
        violations=sum(v > epsilon + tolerance for v in values),
    )


def verify_budget(ledger: PerturbationLedger, epsilon: float,
                  tolerance: float = DEFAULT_TOLERANCE) -> list[Violation]:
    """Every ledger entry whose L-inf exceeds epsilon + tolerance."""
    ledger.validate()
    return [Violation(e.sample_id, e.round, e.linf, epsilon)
            for e in sorted(ledger.entries, key=lambda e: (e.round, e.sample_id))
            if e.linf > epsilon + tolerance]


def envelope_violations(ledger: PerturbationLedger, epsilon: float,
                        tolerance: float = DEFAULT_TOLERANCE) -> list[Violation]:
    """Entries breaking the triangle-inequality ceiling round * epsilon."""
    return [Violation(e.sample_id, e.round, e.linf, epsilon)
            for e in ledger.entries if e.linf > e.round * epsilon + tolerance]


@dataclass(frozen=True)
class GrowthFit:
    slope: float       # intensity units per round, fit through the origin
    residual: float    # rms deviation of per-round maxima from slope * n
    rounds: int

    def to_dict(self) -> dict:
        return {"slope": self.slope, "residual": self.residual, "rounds": self.rounds}


def fit_growth_law(round_maxima: dict[int, float]) -> GrowthFit:
    """Least-squares slope of max L-inf against round number, through 0."""
    if len(round_maxima) < 2:
        raise ValueError(f"growth fit needs at least 2 rounds, got {len(round_maxima)}")
    ns = np.array(sorted(round_maxima), dtype=np.float64)
    ys = np.array([round_maxima[int(n)] for n in ns])
    slope = float((ns * ys).sum() / (ns * ns).sum())
    residual = float(np.sqrt(np.mean((ys - slope * ns) ** 2)))
    return GrowthFit(slope, residual, int(ns[-1]))


def fit_growth_law_ledger(ledger: PerturbationLedger) -> GrowthFit:
    return fit_growth_law(ledger.max_linf_by_round())


# ---------------------------------------------------------------------------
# file-level audit
# ---------------------------------------------------------------------------

@dataclass
class AuditReport:
    epsilon: float
    tolerance: float
    quantized: bool
    violations: list[Violation]
    orphans: list[str]
    mismatches: list[str]          # ledger rows disagreeing with on-disk norms
    round_max: dict[int, float]    # recomputed from files
    growth: GrowthFit | None

    @property
    def ok(self) -> bool:
        return not (self.violations or self.orphans or self.mismatches)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "tolerance": self.tolerance,
            "quantized": self.quantized,
            "ok": self.ok,
            "violations": [v.to_dict() for v in self.violations],
            "orphans": self.orphans,
            "mismatches": self.mismatches,
            "round_max": {str(k): v for k, v in sorted(self.round_max.items())},
            "growth": self.growth.to_dict() if self.growth else None,
        }


def _load_sidecar(path) -> np.ndarray:
    arr = np.load(path)
    if arr.dtype != np.float32:
        raise ValueError(f"{path}: expected float32 sidecar, got {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: non-finite pixel values")
    return arr


def _quantize8(x: np.ndarray) -> np.ndarray:
    return np.round(x.astype(np.float64) * 255.0) / 255.0


def _scan_ids(dirpath) -> dict[int, str]:
    out = {}
    if not os.path.isdir(dirpath):
        return out
    for name in sorted(os.listdir(dirpath)):
        if name.startswith("sample_") and name.endswith(".npy"):
            out[int(name[len("sample_"):-len(".npy")])] = os.path.join(dirpath, name)
    return out


def audit_campaign(campaign_dir, epsilon: float | None = None,
                   tolerance: float = DEFAULT_TOLERANCE,
                   quantize: bool = False) -> AuditReport:
    """Recompute every per-round norm from the raw sidecars in a campaign
    directory and check them against the budget.

    With ``quantize`` set, images are first snapped to the 8-bit grid, which
    models storage as ordinary image files. Ledger cross-checking is skipped
    in that mode since the ledger records continuous-valued norms.
    """
    manifest_path = os.path.join(campaign_dir, "manifest.json")
    if epsilon is None:
        if not os.path.exists(manifest_path):
            raise ValueError(f"no epsilon given and no manifest at {manifest_path}")
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        epsilon = float(manifest["epsilon"])

    originals = _scan_ids(os.path.join(campaign_dir, ORIGINALS_DIR))
    if not originals:
        raise ValueError(f"no original images under {campaign_dir}")
    loaded = {sid: _load_sidecar(p) for sid, p in originals.items()}
    if quantize:
        loaded = {sid: _quantize8(a) for sid, a in loaded.items()}

    orphans: list[str] = []
    violations: list[Violation] = []
    round_max: dict[int, float] = {}
    measured: dict[tuple[int, int], float] = {}

    rounds = []
    images_root = os.path.join(campaign_dir, "images")
    for name in sorted(os.listdir(images_root)):
        if name.startswith("round_"):
            rounds.append(int(name[len("round_"):]))
    for rnd in rounds:
        files = _scan_ids(os.path.join(campaign_dir, round_dir(rnd)))
        for sid in sorted(set(files) | set(originals)):
            if sid not in originals:
                orphans.append(f"{round_dir(rnd)}/{sample_name(sid)}.npy has no original")
                continue
            if sid not in files:
                orphans.append(f"{sample_name(sid)} missing from {round_dir(rnd)}")
                continue
            adv = _load_sidecar(files[sid])
            if quantize:
                adv = _quantize8(adv)
            dist = linf(loaded[sid], adv)
            measured[(sid, rnd)] = dist
            round_max[rnd] = max(round_max.get(rnd, 0.0), dist)
            if dist > epsilon + tolerance:
                violations.append(Violation(sid, rnd, dist, epsilon))

    mismatches: list[str] = []
    finals = _scan_ids(os.path.join(campaign_dir, FINAL_DIR))
    last_round = _scan_ids(os.path.join(campaign_dir, round_dir(rounds[-1]))) \
        if rounds else {}
    for sid in sorted(set(finals) | set(originals)):
        if sid not in originals:
            orphans.append(f"{FINAL_DIR}/{sample_name(sid)}.npy has no original")
            continue
        if sid not in finals:
            orphans.append(f"{sample_name(sid)} has no final image")
            continue
        final = _load_sidecar(finals[sid])
        # the final set must be a byte-for-byte copy of the last round; when
        # it is, its norm was already measured there, so skip re-measuring
        if rounds and sid in last_round:
            if np.array_equal(final, _load_sidecar(last_round[sid])):
                continue
            mismatches.append(f"final image for sample {sid} differs from "
                              f"{round_dir(rounds[-1])}")
        dist = linf(loaded[sid], _quantize8(final) if quantize else final)
        if dist > epsilon + tolerance:
            violations.append(Violation(sid, rounds[-1] if rounds else 0,
                                        dist, epsilon))
    ledger_path = os.path.join(campaign_dir, "ledger.csv")
    if os.path.exists(ledger_path) and not quantize:
        ledger = PerturbationLedger.from_csv(ledger_path, epsilon)
        for e in ledger.entries:
            got = measured.get((e.sample_id, e.round))
            if got is None:
                mismatches.append(f"ledger row (sample {e.sample_id}, round {e.round}) "
                                  f"has no on-disk images")
            elif abs(got - e.linf) > tolerance:
                mismatches.append(f"sample {e.sample_id} round {e.round}: ledger says "
                                  f"linf={e.linf:.9g}, files say {got:.9g}")

    growth = fit_growth_law(round_max) if len(round_max) >= 2 else None
    return AuditReport(float(epsilon), tolerance, quantize, violations, orphans,
                       mismatches, round_max, growth)
