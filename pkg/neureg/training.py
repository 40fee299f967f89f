"""Optimization loop, checkpoints, registration and cross-domain evaluation."""
from __future__ import annotations

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from neureg.config import EncoderConfig, TrainConfig
from neureg.domaingen import encoder_input
from neureg.encoder import ModelParams, forward, init_params
from neureg.errors import (
    BadMagicError,
    FormatError,
    InvalidInputError,
    ShapeMismatchError,
    TrainingDivergedError,
    TruncatedPayloadError,
)
from neureg.fourierdecoder import DeformationField, decode, decode_tensor
from neureg.lossmetrics import dice, ssim3, total_loss
from neureg.synthdata import Dataset, Sample
from neureg.tensorautodiff import Tape, Tensor, backward
from neureg.volume import Dims, LabelVolume, Volume3, normalize_minmax
from neureg.warp import jacobian_stats, warp_labels, warp_tensor, warp_trilinear

CHECKPOINT_MAGIC = b"NRC1"
CHECKPOINT_VERSION = 1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

PAIR_METRICS = ["ssim", "dice_mean", "jacobian_min", "jacobian_nonpos_fraction"]
BASELINE_METRICS = ["baseline_ssim", "baseline_dice_mean"]


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First and second moment estimates plus the step counter."""

    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    def copy(self) -> "AdamState":
        return AdamState(
            step=self.step,
            m=[a.copy() for a in self.m],
            v=[a.copy() for a in self.v],
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )


def adam_step(
    params: Sequence[Tensor | np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """Bias-corrected Adam update, applied to the parameter arrays in place."""
    arrays = [p.data if isinstance(p, Tensor) else p for p in params]
    if len(arrays) != len(grads):
        raise ShapeMismatchError(f"adam_step: {len(arrays)} params but {len(grads)} grads")
    for a, g in zip(arrays, grads):
        if a.shape != np.shape(g):
            raise ShapeMismatchError(f"adam_step: param {a.shape} vs grad {np.shape(g)}")
    if not state.m:
        state.m = [np.zeros_like(a) for a in arrays]
        state.v = [np.zeros_like(a) for a in arrays]

    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        a -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: Optional[float]
    val_loss: float


@dataclass
class Checkpoint:
    """Trained encoder, optimizer moments and training bookkeeping."""

    train_config: TrainConfig
    params: ModelParams
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    best_val_loss: float = math.inf
    history: list[EpochRecord] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def initial(cls, config: TrainConfig) -> "Checkpoint":
        """Untrained checkpoint with freshly initialized parameters."""
        return cls(config, init_params(config.encoder, config.seed))

    @property
    def encoder_config(self) -> EncoderConfig:
        return self.train_config.encoder

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.epoch, r.train_loss, r.val_loss) for r in self.history],
            columns=["epoch", "train_loss", "val_loss"],
        )


def _finite_or_none(x: float) -> Optional[float]:
    return float(x) if math.isfinite(x) else None


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    """Write ``NRC1``, a u32 header length, a JSON header, then f64 payloads."""
    blocks: list[tuple[str, str, np.ndarray]] = [
        ("param", name, t.data) for name, t in checkpoint.params.tensors.items()
    ]
    names = checkpoint.params.names
    if checkpoint.adam.m:
        blocks += [("adam_m", n, a) for n, a in zip(names, checkpoint.adam.m)]
        blocks += [("adam_v", n, a) for n, a in zip(names, checkpoint.adam.v)]

    entries = []
    offset = 0
    for group, name, array in blocks:
        entries.append({"group": group, "name": name, "shape": list(array.shape), "offset": offset})
        offset += array.size * 8
    header = {
        "version": checkpoint.version,
        "train_config": checkpoint.train_config.model_dump(mode="json", by_alias=True),
        "epoch": checkpoint.epoch,
        "best_val_loss": _finite_or_none(checkpoint.best_val_loss),
        "adam": {
            "step": checkpoint.adam.step,
            "beta1": checkpoint.adam.beta1,
            "beta2": checkpoint.adam.beta2,
            "eps": checkpoint.adam.eps,
        },
        "history": [
            {"epoch": r.epoch, "train_loss": r.train_loss, "val_loss": _finite_or_none(r.val_loss)}
            for r in checkpoint.history
        ],
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for _, _, array in blocks:
            f.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    logging.info(f"Saved checkpoint (epoch {checkpoint.epoch}) to {path}")


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: missing NRC1 magic")
    if len(raw) < 8:
        raise TruncatedPayloadError(f"{path}: header length missing")
    (n_header,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + n_header:
        raise TruncatedPayloadError(f"{path}: header is shorter than {n_header} bytes")
    try:
        header = json.loads(raw[8 : 8 + n_header].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable checkpoint header: {e}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {header.get('version')} is not supported")
    payload = raw[8 + n_header :]

    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"]
        if start + count * 8 > len(payload):
            raise TruncatedPayloadError(f"{path}: tensor {entry['name']} runs past the payload")
        array = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(shape)
        groups[entry["group"]][entry["name"]] = array.astype(np.float64)

    config = TrainConfig.model_validate(header["train_config"])
    params = ModelParams.from_arrays(config.encoder, groups["param"])
    adam = AdamState(
        step=header["adam"]["step"],
        m=[groups["adam_m"][n] for n in params.names] if groups["adam_m"] else [],
        v=[groups["adam_v"][n] for n in params.names] if groups["adam_v"] else [],
        beta1=header["adam"]["beta1"],
        beta2=header["adam"]["beta2"],
        eps=header["adam"]["eps"],
    )
    best = header["best_val_loss"]
    history = [
        EpochRecord(r["epoch"], r["train_loss"], math.inf if r["val_loss"] is None else r["val_loss"])
        for r in header["history"]
    ]
    logging.info(f"Loaded checkpoint (epoch {header['epoch']}) from {path}")
    return Checkpoint(
        config, params, adam, header["epoch"], math.inf if best is None else best, history
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PreparedSample:
    """Encoder input and similarity target of one sample."""

    subject: int
    encoder_input: np.ndarray
    image: np.ndarray

    @property
    def dims(self) -> Dims:
        return self.image.shape  # type: ignore[return-value]


def prepare_sample(sample: Sample, config: TrainConfig) -> PreparedSample:
    return PreparedSample(
        sample.subject,
        encoder_input(sample.image, config.dg_patch_size, config.dg_enabled),
        normalize_minmax(sample.image).data.astype(np.float64),
    )


def pair_loss(
    params: ModelParams, fixed: PreparedSample, moving: PreparedSample, config: TrainConfig
) -> tuple[Tensor, Tensor]:
    """Registration loss of one pair and the decoded full-resolution field."""
    lowres = forward(fixed.encoder_input, moving.encoder_input, params, config.encoder)
    phi = decode_tensor(lowres, fixed.dims)
    warped = warp_tensor(moving.image, phi)
    return total_loss(fixed.image, warped, phi, config.loss), phi


class Trainer:
    """Trains the encoder on inter-subject pairs of one domain.

    One subject is held out for validation when the domain has three or
    more; its pairs with the training subjects drive early stopping.
    """

    def __init__(self, dataset: Dataset, config: TrainConfig, show_progress: bool = False) -> None:
        self.config = config
        self.show_progress = show_progress
        samples = dataset.subjects(config.training_domain)
        if len(samples) < 2:
            raise InvalidInputError(
                f"domain {config.training_domain!r} has {len(samples)} subjects, need at least 2"
            )
        self.prepared = {s.subject: prepare_sample(s, config) for s in samples}
        self.rng = np.random.default_rng([config.seed, 1])
        self.train_ids, self.val_pairs = self._split(sorted(self.prepared))

    def _split(self, subjects: list[int]) -> tuple[list[int], list[tuple[int, int]]]:
        if len(subjects) == 2:
            logging.warning("Only two training subjects: validating on the training pairs")
            a, b = subjects
            return subjects, [(a, b), (b, a)]
        held = subjects[int(self.rng.integers(len(subjects)))]
        train_ids = [s for s in subjects if s != held]
        candidates = [(held, t) for t in train_ids] + [(t, held) for t in train_ids]
        order = self.rng.permutation(len(candidates))
        val_pairs = [candidates[i] for i in order[: self.config.val_pairs]]
        logging.info(f"Held-out subject {held}; training subjects {train_ids}")
        return train_ids, val_pairs

    def validation_loss(self, params: ModelParams) -> float:
        losses = [
            pair_loss(params, self.prepared[f], self.prepared[m], self.config)[0].item()
            for f, m in self.val_pairs
        ]
        return float(np.mean(losses))

    def _step(self, params: ModelParams, state: AdamState, fixed: int, moving: int, epoch: int) -> float:
        params.zero_grad()
        with Tape():
            loss, _ = pair_loss(params, self.prepared[fixed], self.prepared[moving], self.config)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"loss is {value} at epoch {epoch}, pair (fixed={fixed}, moving={moving})"
                )
            backward(loss)
        adam_step(list(params), params.grads(), state, self.config.lr)
        if not params.all_finite():
            raise TrainingDivergedError(f"non-finite parameters after epoch {epoch} step")
        return value

    def run(self) -> Checkpoint:
        """Train until ``epochs`` or early stopping; return the best checkpoint."""
        config = self.config
        params = init_params(config.encoder, config.seed)
        state = AdamState()
        best_val = self.validation_loss(params)
        best = Checkpoint(config, params.copy(), state.copy(), 0, best_val)
        history = [EpochRecord(0, None, best_val)]
        logging.info(f"Epoch 0/{config.epochs}: val_loss={best_val:.6f}")

        bar = tqdm(
            range(1, config.epochs + 1), desc="Epochs", unit="epoch", disable=not self.show_progress
        )
        for epoch in bar:
            step_losses = []
            for _ in range(config.pairs_per_epoch):
                i, j = self.rng.choice(len(self.train_ids), size=2, replace=False)
                fixed, moving = self.train_ids[int(i)], self.train_ids[int(j)]
                step_losses.append(self._step(params, state, fixed, moving, epoch))
            train_loss = float(np.mean(step_losses))
            val_loss = self.validation_loss(params)
            history.append(EpochRecord(epoch, train_loss, val_loss))

            if val_loss < best.best_val_loss:
                best = Checkpoint(config, params.copy(), state.copy(), epoch, val_loss)
            bar.set_postfix(train=f"{train_loss:.4f}", val=f"{val_loss:.4f}", best=best.epoch)
            logging.info(
                f"Epoch {epoch}/{config.epochs}: train_loss={train_loss:.6f}, "
                f"val_loss={val_loss:.6f}, best_epoch={best.epoch}"
            )
            if epoch - best.epoch >= config.patience:
                logging.info(f"Early stopping at epoch {epoch}, best epoch {best.epoch}")
                break

        best.history = history
        return best


def train(dataset: Dataset, config: TrainConfig, show_progress: bool = False) -> Checkpoint:
    """Train on ``config.training_domain`` and return the best checkpoint."""
    return Trainer(dataset, config, show_progress).run()


# ---------------------------------------------------------------------------
# Registration and evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    warped: Volume3
    field: DeformationField


def register_pair(fixed: Volume3, moving: Volume3, checkpoint: Checkpoint) -> RegistrationResult:
    """Predict the field aligning ``moving`` to ``fixed`` and resample ``moving``."""
    if fixed.dims != moving.dims:
        raise ShapeMismatchError(f"register: fixed {fixed.dims} and moving {moving.dims} differ")
    config = checkpoint.train_config
    lowres = forward(
        encoder_input(fixed, config.dg_patch_size, config.dg_enabled),
        encoder_input(moving, config.dg_patch_size, config.dg_enabled),
        checkpoint.params,
        config.encoder,
    )
    phi = decode(lowres.data, fixed.dims)
    return RegistrationResult(warp_trilinear(moving, phi), phi)


@dataclass(frozen=True, eq=False)
class EvalPair:
    fixed: Sample
    moving: Sample


def build_cross_domain_pairs(
    dataset: Dataset,
    training_domain: str,
    seed: int,
    max_pairs_per_domain: Optional[int] = None,
) -> list[EvalPair]:
    """Inter-subject pairs within each domain other than ``training_domain``."""
    rng = np.random.default_rng([seed, 2])
    pairs: list[EvalPair] = []
    for domain in dataset.domains:
        if domain == training_domain:
            continue
        samples = dataset.subjects(domain)
        candidates = [(a, b) for a in samples for b in samples if a.subject != b.subject]
        order = rng.permutation(len(candidates))
        if max_pairs_per_domain is not None:
            order = order[:max_pairs_per_domain]
        pairs += [EvalPair(*candidates[i]) for i in order]
    if not pairs:
        logging.warning(f"No unseen-domain pairs besides {training_domain!r}")
    return pairs


def _label_dice(a: LabelVolume, b: LabelVolume) -> float:
    return dice(a, b).mean


def _evaluate_pair(checkpoint: Checkpoint, index: int, pair: EvalPair) -> dict[str, object]:
    result = register_pair(pair.fixed.image, pair.moving.image, checkpoint)
    warped_labels = warp_labels(pair.moving.labels, result.field)
    jac = jacobian_stats(result.field)
    return {
        "pair": index,
        "fixed_subject": pair.fixed.subject,
        "moving_subject": pair.moving.subject,
        "domain": pair.fixed.domain,
        "ssim": ssim3(pair.fixed.image, result.warped),
        "dice_mean": _label_dice(pair.fixed.labels, warped_labels),
        "jacobian_min": jac.min_det,
        "jacobian_nonpos_fraction": jac.nonpos_fraction,
        "baseline_ssim": ssim3(pair.fixed.image, pair.moving.image),
        "baseline_dice_mean": _label_dice(pair.fixed.labels, pair.moving.labels),
    }


@dataclass
class CrossDomainReport:
    """Per-pair metrics of a checkpoint and of the identity (zero-field) baseline."""

    pairs: pd.DataFrame

    def summary(self) -> dict[str, dict[str, float]]:
        """Mean and population standard deviation of every metric."""
        out: dict[str, dict[str, float]] = {}
        for column in PAIR_METRICS + BASELINE_METRICS:
            values = self.pairs[column] if len(self.pairs) else pd.Series(dtype=float)
            out[column] = {"mean": float(values.mean()), "sd": float(values.std(ddof=0))}
        return out

    def mean(self, column: str) -> float:
        return self.summary()[column]["mean"]

    def to_dict(self) -> dict[str, object]:
        return {
            "n_pairs": len(self.pairs),
            "summary": self.summary(),
            "pairs": self.pairs.to_dict(orient="records"),
        }


def evaluate_cross_domain(
    checkpoint: Checkpoint,
    test_pairs: list[EvalPair],
    threads: int = 1,
    show_progress: bool = False,
) -> CrossDomainReport:
    """Register every test pair and score it against the unregistered baseline.

    Pairs may run on several threads; rows are kept in pair order.
    """
    training_domain = checkpoint.train_config.training_domain
    if any(p.fixed.domain == training_domain or p.moving.domain == training_domain for p in test_pairs):
        logging.warning(f"Some test pairs come from the training domain {training_domain!r}")

    def job(item: tuple[int, EvalPair]) -> dict[str, object]:
        return _evaluate_pair(checkpoint, *item)

    items = list(enumerate(test_pairs))
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        rows = list(
            tqdm(pool.map(job, items), total=len(items), desc="Pairs", disable=not show_progress)
        )
    columns = ["pair", "fixed_subject", "moving_subject", "domain"] + PAIR_METRICS + BASELINE_METRICS
    report = CrossDomainReport(pd.DataFrame(rows, columns=columns))
    if rows:
        logging.info(
            f"Evaluated {len(rows)} pairs: dice_mean={report.mean('dice_mean'):.4f} "
            f"(baseline {report.mean('baseline_dice_mean'):.4f}), ssim={report.mean('ssim'):.4f}"
        )
    return report


# ---------------------------------------------------------------------------
# Experiment protocols
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    table: pd.DataFrame
    summary: dict[str, float]

    def to_dict(self) -> dict[str, object]:
        return {"summary": self.summary, "rows": self.table.to_dict(orient="records")}


def run_dg_ablation(
    dataset: Dataset,
    config: TrainConfig,
    seeds: Sequence[int],
    max_pairs_per_domain: Optional[int] = None,
    threads: int = 1,
    show_progress: bool = False,
) -> ExperimentReport:
    """Train with and without the domain-generalization layer for each seed.

    Both variants are evaluated on the same unseen-domain pairs.
    """
    rows = []
    for seed in seeds:
        pairs = build_cross_domain_pairs(dataset, config.training_domain, seed, max_pairs_per_domain)
        row: dict[str, float] = {"seed": seed}
        for label, enabled in (("with_dg", True), ("without_dg", False)):
            variant = config.model_copy(update={"seed": seed, "dg_enabled": enabled})
            report = evaluate_cross_domain(train(dataset, variant, show_progress), pairs, threads)
            row[f"dice_{label}"] = report.mean("dice_mean")
            row[f"ssim_{label}"] = report.mean("ssim")
            row["dice_baseline"] = report.mean("baseline_dice_mean")
            row["ssim_baseline"] = report.mean("baseline_ssim")
        logging.info(f"DG ablation seed {seed}: {row}")
        rows.append(row)
    table = pd.DataFrame(rows)
    summary = {
        "dice_with_dg": float(table["dice_with_dg"].mean()),
        "dice_without_dg": float(table["dice_without_dg"].mean()),
        "dice_baseline": float(table["dice_baseline"].mean()),
        "dg_gain": float((table["dice_with_dg"] - table["dice_without_dg"]).mean()),
        "gain_over_baseline": float((table["dice_with_dg"] - table["dice_baseline"]).mean()),
    }
    return ExperimentReport(table, summary)


def run_leave_one_domain_out(
    dataset: Dataset,
    config: TrainConfig,
    max_pairs_per_domain: Optional[int] = None,
    threads: int = 1,
    show_progress: bool = False,
) -> ExperimentReport:
    """Train on each domain in turn and evaluate on all the others."""
    rows = []
    for domain in dataset.domains:
        variant = config.model_copy(update={"training_domain": domain})
        pairs = build_cross_domain_pairs(dataset, domain, config.seed, max_pairs_per_domain)
        report = evaluate_cross_domain(train(dataset, variant, show_progress), pairs, threads)
        rows.append(
            {
                "training_domain": domain,
                "dice_mean": report.mean("dice_mean"),
                "dice_baseline": report.mean("baseline_dice_mean"),
                "ssim": report.mean("ssim"),
                "ssim_baseline": report.mean("baseline_ssim"),
            }
        )
        logging.info(f"Leave-one-domain-out, trained on {domain}: {rows[-1]}")
    table = pd.DataFrame(rows)
    summary = {
        "dice_mean": float(table["dice_mean"].mean()),
        "dice_baseline": float(table["dice_baseline"].mean()),
    }
    return ExperimentReport(table, summary)
