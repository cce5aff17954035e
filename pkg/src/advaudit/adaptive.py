"""Multi-round attack campaigns in two projection semantics.

BUGGY mode re-centers each round's epsilon ball on the previous round's
output, so budgets stack: after n rounds the distance to the pristine
originals can reach n * epsilon. CORRECTED mode keeps the ball centered on
the originals, so the total perturbation never exceeds epsilon. Both modes
warm-start PGD from the current adversarial images, and with a single round
they coincide bitwise.

Per-sample RNG streams are keyed by (seed, round, sample id), and the inner
attack loss is a batch sum, so campaign results are independent of batch
size and of the number of worker threads.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .attack import BUDGET_TOL, AttackConfig, pgd_attack, rng_streams
from .audit import PerturbationLedger, RoundReport, l2, linf, round_report

MODES = ("BUGGY", "CORRECTED")
_MODE_CODE = {m: i for i, m in enumerate(MODES)}


@dataclass(frozen=True)
class AdaptiveConfig:
    inner: AttackConfig
    num_rounds: int = 20
    batch_size: int = 32
    mode: str = "BUGGY"

    def __post_init__(self):
        if self.num_rounds < 1:
            raise ValueError(f"num_rounds must be >= 1, got {self.num_rounds}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.inner.targeted:
            raise ValueError("campaigns drive untargeted attacks; targeted "
                             "configs are single-round only")


def select_failed(predictions, labels) -> np.ndarray:
    """Indices the model still classifies correctly (attack not yet done)."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"predictions {predictions.shape} vs labels {labels.shape}")
    return np.flatnonzero(predictions == labels)


@dataclass
class CampaignState:
    """Everything needed to resume a campaign after any completed round."""

    originals: np.ndarray
    current: np.ndarray
    labels: np.ndarray
    success: np.ndarray
    predicted: np.ndarray
    completed_rounds: int
    epsilon: float
    mode: str
    seed: int

    def save(self, path):
        dc.save_tensors(path, {
            "originals": self.originals.astype(np.float32),
            "current": self.current.astype(np.float32),
            "labels": self.labels.astype(np.int64),
            "success": self.success.astype(np.int64),
            "predicted": self.predicted.astype(np.int64),
            "completed_rounds": np.array(self.completed_rounds, dtype=np.int64),
            "epsilon": np.array(self.epsilon, dtype=np.float64),
            "mode": np.array(_MODE_CODE[self.mode], dtype=np.int64),
            "seed": np.array(self.seed, dtype=np.int64),
        })

    @classmethod
    def load(cls, path) -> "CampaignState":
        t = dc.load_tensors(path)
        missing = {"originals", "current", "labels", "success", "predicted",
                   "completed_rounds", "epsilon", "mode", "seed"} - set(t)
        if missing:
            raise ValueError(f"{path}: campaign state missing tensors {sorted(missing)}")
        code = int(t["mode"])
        if code not in range(len(MODES)):
            raise ValueError(f"{path}: unknown mode code {code}")
        return cls(
            originals=t["originals"], current=t["current"],
            labels=t["labels"], success=t["success"].astype(bool),
            predicted=t["predicted"], completed_rounds=int(t["completed_rounds"]),
            epsilon=float(t["epsilon"]), mode=MODES[code], seed=int(t["seed"]),
        )


@dataclass
class CampaignResult:
    final_images: np.ndarray
    ledger: PerturbationLedger
    reports: list[RoundReport]
    state: CampaignState


def _run_round(model, current, labels, idx, cfg: AdaptiveConfig, originals,
               round_index: int, jobs: int):
    """Attack the selected samples in batches; returns updated copies."""
    chunks = [idx[lo:lo + cfg.batch_size] for lo in range(0, idx.size, cfg.batch_size)]

    def attack_chunk(chunk):
        start = current[chunk]
        base = start.copy() if cfg.mode == "BUGGY" else originals[chunk]
        rngs = rng_streams(cfg.inner.seed, chunk, round_index=round_index)
        return pgd_attack(model, start, labels[chunk], cfg.inner,
                          baseline=base, rngs=rngs)

    if jobs > 1 and len(chunks) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(attack_chunk, chunks))
    else:
        results = [attack_chunk(c) for c in chunks]

    new_current = current.copy()
    new_pred = {}
    new_success = {}
    for chunk, res in zip(chunks, results):  # merge in index order
        new_current[chunk] = res.x_adv
        for j, sid in enumerate(chunk):
            new_pred[int(sid)] = int(res.predicted[j])
            new_success[int(sid)] = bool(res.success[j])
    return new_current, new_pred, new_success


def adaptive_attack(model, images, labels, cfg: AdaptiveConfig, *,
                    force_reattack: bool = False, jobs: int = 1,
                    ledger: PerturbationLedger | None = None,
                    resume: CampaignState | None = None,
                    round_callback=None) -> CampaignResult:
    """Run a multi-round campaign; see the module docstring for the modes.

    Each round re-attacks only the samples the model still classifies
    correctly; successful samples stay frozen. `force_reattack` re-attacks
    everything every round (test fixtures use this to make the accumulation
    law deterministic). `round_callback(round, images, report)` fires after
    each round with a snapshot of the working images.
    """
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    originals = np.array(images, dtype=np.float32)
    originals.setflags(write=False)
    labels = np.asarray(labels, dtype=np.int64)
    n = originals.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    eps = float(cfg.inner.epsilon)

    if resume is not None:
        if resume.completed_rounds >= cfg.num_rounds:
            raise ValueError(f"state already has {resume.completed_rounds} rounds; "
                             f"campaign asks for {cfg.num_rounds}")
        if resume.mode != cfg.mode or resume.epsilon != eps or resume.seed != cfg.inner.seed:
            raise ValueError("campaign state was produced under a different "
                             f"config (mode={resume.mode}, epsilon={resume.epsilon}, "
                             f"seed={resume.seed})")
        if not np.array_equal(resume.originals, originals):
            raise ValueError("campaign state originals do not match the dataset")
        if not np.array_equal(resume.labels, labels):
            raise ValueError("campaign state labels do not match the dataset")
        current = resume.current.astype(np.float32).copy()
        success = resume.success.astype(bool).copy()
        predicted = resume.predicted.astype(np.int64).copy()
        start_round = resume.completed_rounds + 1
    else:
        current = originals.copy()
        success = np.zeros(n, dtype=bool)
        predicted = model.predict_labels(originals)
        start_round = 1

    if ledger is None:
        ledger = PerturbationLedger(epsilon=eps, mode=cfg.mode, seed=cfg.inner.seed)
    reports: list[RoundReport] = []

    for rnd in range(start_round, cfg.num_rounds + 1):
        idx = np.arange(n) if force_reattack else select_failed(predicted, labels)
        if idx.size:
            current, pred_upd, succ_upd = _run_round(
                model, current, labels, idx, cfg, originals, rnd, jobs)
            for sid, p in pred_upd.items():
                predicted[sid] = p
            for sid, s in succ_upd.items():
                success[sid] = success[sid] or s

        for sid in range(n):
            ledger.add(sid, rnd, linf(originals[sid], current[sid]),
                       l2(originals[sid], current[sid]), bool(success[sid]))
        report = round_report(ledger.by_round(rnd), rnd, epsilon=eps)
        reports.append(report)

        if cfg.mode == "CORRECTED" and report.max_linf > eps + BUDGET_TOL:
            raise RuntimeError(f"CORRECTED-mode invariant broken at round {rnd}: "
                               f"max linf {report.max_linf:.9g} > {eps:.9g}")
        if round_callback is not None:
            round_callback(rnd, current.copy(), report)

    state = CampaignState(originals=originals.copy(), current=current.copy(),
                          labels=labels.copy(), success=success.copy(),
                          predicted=predicted.copy(), completed_rounds=cfg.num_rounds,
                          epsilon=eps, mode=cfg.mode, seed=cfg.inner.seed)
    return CampaignResult(current, ledger, reports, state)
