"""Joint training of the full-size network and projected students.

The objective is a weighted sum of three cross-entropy pieces: the
trainer against labels, the student against the trainer's softened
predictions, and the student against labels. Soft targets are treated
as constants unless couple_teacher is set, in which case the imitation
term also pushes gradient back into the trainer.

Because the default leaves the trainer's updates independent of every
student, one trainer can drive any number of student heads in a single
pass and each head comes out bit-identical to the run it would have had
alone. train_many exploits that for sweeps.
"""

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import kernels
from .config import RunConfig, format_config, parse_config_text
from .data import Dataset, dense_inputs
from .errors import ConfigError, DataError, ModelFormatError
from .models import HeadConfig, JointModel, TrainerConfig
from .nn import CLIP_EPS, Mlp, sgd_step, softmax
from .projection import ProjectionConfig, project_rows

# Entropy tag mixed with the run seed for the batch-order stream, so
# batch order depends on the seed alone and not on model construction.
_BATCH_STREAM = 0xB0BA


# the three objective terms, maskable individually
TERMS = ("theta", "p", "hat_p")


@dataclass(frozen=True)
class LossSpec:
    """Weights and knobs of the three-part objective.

    A term absent from mask contributes nothing to the value or the
    gradient, independent of its lambda.
    """

    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 1.0
    temperature: float = 1.0
    use_kl: bool = False
    couple_teacher: bool = False
    mask: frozenset = frozenset(TERMS)

    def __post_init__(self):
        unknown = set(self.mask) - set(TERMS)
        if unknown:
            raise ConfigError(
                f"unknown loss terms {sorted(unknown)}; pick from {TERMS}"
            )

    @property
    def l1(self) -> float:
        return self.lambda1 if "theta" in self.mask else 0.0

    @property
    def l2(self) -> float:
        return self.lambda2 if "p" in self.mask else 0.0

    @property
    def l3(self) -> float:
        return self.lambda3 if "hat_p" in self.mask else 0.0

    @property
    def teacher_in_play(self) -> bool:
        """Does anything require running the trainer forward?"""
        return self.l1 > 0 or self.l2 > 0

    @classmethod
    def from_config(cls, cfg: RunConfig, use_kl: bool = False,
                    couple_teacher: bool = False,
                    mask=frozenset(TERMS)) -> "LossSpec":
        return cls(cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.temperature,
                   use_kl, couple_teacher, frozenset(mask))


@dataclass
class LossParts:
    total: float
    theta: float
    p: float
    hat_p: float


@dataclass
class EvalReport:
    network: str
    p1: float
    p3: float
    p5: float
    loss: LossParts


def _logp(probs: np.ndarray) -> np.ndarray:
    return np.log(probs + CLIP_EPS)


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        i = int(bad[0])
        raise DataError(
            f"label {int(labels[i])} at example {i} outside "
            f"[0, {num_classes})"
        )


def _onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _parts_from_pieces(theta, p, hat_p, spec: LossSpec) -> LossParts:
    """Weighted total. Masked-out terms report 0.0; terms that never ran
    (trainer skipped) report nan; both contribute nothing."""
    theta = theta if "theta" in spec.mask else 0.0
    p = p if "p" in spec.mask else 0.0
    hat_p = hat_p if "hat_p" in spec.mask else 0.0

    def contrib(weight, piece):
        return 0.0 if np.isnan(piece) else weight * piece

    total = (contrib(spec.l1, theta) + contrib(spec.l2, p)
             + contrib(spec.l3, hat_p))
    return LossParts(float(total), float(theta), float(p), float(hat_p))


def _loss_pieces(probs_t, probs_s, soft_targets, labels, spec: LossSpec):
    """(theta, p, hat_p) per-example means; theta and p are nan when the
    trainer sat this batch out."""
    n = labels.shape[0]
    rows = np.arange(n)
    hat_p = float(-_logp(probs_s)[rows, labels].mean())
    if probs_t is None:
        return np.nan, np.nan, hat_p
    theta = float(-_logp(probs_t)[rows, labels].mean())
    p = float(-(soft_targets * _logp(probs_s)).sum(axis=1).mean())
    if spec.use_kl:
        entropy = float(-(soft_targets * _logp(soft_targets)).sum(axis=1).mean())
        p -= entropy
    return theta, p, hat_p


def _student_logit_grad(probs_s, soft, Y, spec: LossSpec, n: int):
    if soft is None:
        return spec.l3 * (probs_s - Y) / n
    return (spec.l2 * (probs_s - soft) + spec.l3 * (probs_s - Y)) / n


def _imitation_pull(probs_s, soft, spec: LossSpec, n: int):
    """Trainer-logit gradient of the imitation term when coupled."""
    logp_s = _logp(probs_s)
    tau = spec.temperature
    if spec.use_kl:
        log_soft = _logp(soft)
        kl = (soft * (log_soft - logp_s)).sum(axis=1, keepdims=True)
        pull = soft * ((log_soft - logp_s) - kl) / tau
    else:
        s = (soft * logp_s).sum(axis=1, keepdims=True)
        pull = soft * (s - logp_s) / tau
    return spec.l2 * pull / n


def joint_loss(teacher: Mlp, head: Mlp, X, A, labels, spec: LossSpec) -> LossParts:
    """Objective value only; the finite-difference oracle target."""
    labels = np.asarray(labels)
    probs_s = softmax(head.forward(A))
    _check_labels(labels, probs_s.shape[1])
    if spec.teacher_in_play:
        logits_t = teacher.forward(X)
        probs_t = softmax(logits_t)
        soft = softmax(logits_t / spec.temperature)
    else:
        probs_t = soft = None
    theta, p, hat_p = _loss_pieces(probs_t, probs_s, soft, labels, spec)
    return _parts_from_pieces(theta, p, hat_p, spec)


def joint_grads(teacher: Mlp, head: Mlp, X, A, labels, spec: LossSpec):
    """(parts, teacher_grads_or_None, head_grads) for one batch.

    Gradients are of the mean-over-batch objective.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    logits_s = head.forward(A)
    probs_s = softmax(logits_s)
    _check_labels(labels, logits_s.shape[1])
    Y = _onehot(labels, logits_s.shape[1])

    if not spec.teacher_in_play:
        theta, p, hat_p = _loss_pieces(None, probs_s, None, labels, spec)
        dZs = _student_logit_grad(probs_s, None, Y, spec, n)
        return _parts_from_pieces(theta, p, hat_p, spec), None, head.backward(dZs)

    logits_t = teacher.forward(X)
    probs_t = softmax(logits_t)
    soft = softmax(logits_t / spec.temperature)
    theta, p, hat_p = _loss_pieces(probs_t, probs_s, soft, labels, spec)

    dZs = _student_logit_grad(probs_s, soft, Y, spec, n)
    dZt = spec.l1 * (probs_t - Y) / n
    if spec.couple_teacher and spec.l2 > 0:
        dZt = dZt + _imitation_pull(probs_s, soft, spec, n)

    head_grads = head.backward(dZs)
    teacher_grads = teacher.backward(dZt)
    return _parts_from_pieces(theta, p, hat_p, spec), teacher_grads, head_grads


def precision_at(probs: np.ndarray, labels: np.ndarray,
                 ks: Sequence[int] = (1, 3, 5)) -> Dict[int, float]:
    """P@k per k; ties between equal probabilities go to the lower class."""
    labels = np.asarray(labels)
    order = np.argsort(-probs, axis=1, kind="stable")
    out = {}
    for k in ks:
        kk = min(k, probs.shape[1])
        hits = (order[:, :kk] == labels[:, None]).any(axis=1)
        out[k] = float(hits.mean())
    return out


class BitCache:
    """Packed projection words for every row of a dataset."""

    def __init__(self, ds: Dataset, proj: ProjectionConfig):
        self.proj = proj
        self.words = project_rows(ds.indptr, ds.indices, ds.values, proj)

    def acts(self, rows, encoding: str) -> np.ndarray:
        block = kernels.unpack_rows(self.words[rows], self.proj.nbits)
        if encoding == "signed":
            return 2.0 * block - 1.0
        return block


def build_model(cfg: RunConfig) -> JointModel:
    trainer_cfg = TrainerConfig(cfg.input_dim, cfg.hidden_layers,
                                cfg.num_classes)
    head_cfg = HeadConfig(ProjectionConfig(cfg.seed, cfg.T, cfg.d),
                          cfg.num_classes, cfg.head_hidden_layers,
                          cfg.bit_encoding)
    return JointModel.init(trainer_cfg, head_cfg, seed=cfg.seed)


@dataclass
class TrainOptions:
    use_kl: bool = False
    couple_teacher: bool = False
    pretrain_steps: int = 0
    loss_mask: frozenset = frozenset(TERMS)


@dataclass
class TrainResult:
    cfg: RunConfig
    model: JointModel
    history: List[dict] = field(default_factory=list)

    def last(self, network: str) -> dict:
        for row in reversed(self.history):
            if row["network"] == network:
                return row
        raise KeyError(network)


CSV_COLUMNS = ["step", "network", "p1", "p3", "p5", "loss_total",
               "loss_theta", "loss_p", "loss_hat_p"]


class _CsvLog:
    def __init__(self, path):
        self.fh = open(path, "w", newline="") if path else None
        if self.fh:
            self.writer = csv.writer(self.fh)
            self.writer.writerow(CSV_COLUMNS)

    def row(self, step: int, report: EvalReport) -> dict:
        rec = {
            "step": step, "network": report.network,
            "p1": report.p1, "p3": report.p3, "p5": report.p5,
            "loss_total": report.loss.total, "loss_theta": report.loss.theta,
            "loss_p": report.loss.p, "loss_hat_p": report.loss.hat_p,
        }
        if self.fh:
            self.writer.writerow([
                rec["step"], rec["network"],
                *(f"{rec[c]:.6f}" for c in CSV_COLUMNS[2:]),
            ])
            self.fh.flush()
        return rec

    def close(self):
        if self.fh:
            self.fh.close()


def write_manifest(path, cfg: RunConfig, options: TrainOptions, extra: dict):
    """Config keys verbatim, run facts as comment lines below them."""
    with open(path, "w") as fh:
        fh.write(format_config(cfg))
        fh.write(f"# use_kl = {options.use_kl}\n")
        fh.write(f"# couple_teacher = {options.couple_teacher}\n")
        fh.write(f"# pretrain_steps = {options.pretrain_steps}\n")
        fh.write(f"# loss_mask = {','.join(sorted(options.loss_mask))}\n")
        for key, value in extra.items():
            fh.write(f"# {key} = {value}\n")


def save_checkpoint(path, model: JointModel, cfg: RunConfig) -> None:
    """Full-precision joint checkpoint: config text plus every layer."""
    arrays = {"config": format_config(cfg)}
    for tag, mlp in (("trainer", model.trainer), ("head", model.head)):
        for i, layer in enumerate(mlp.layers):
            arrays[f"{tag}_W{i}"] = layer.W
            arrays[f"{tag}_b{i}"] = layer.b
    np.savez_compressed(path, **arrays)


def load_checkpoint(path):
    """(model, cfg) back from a save_checkpoint file."""
    try:
        z = np.load(path)
    except (OSError, ValueError) as exc:
        raise ModelFormatError(f"cannot read checkpoint {path}: {exc}") \
            from None
    with z:
        try:
            cfg = parse_config_text(str(z["config"][()]), source=str(path))
            model = build_model(cfg)
            for tag, mlp in (("trainer", model.trainer), ("head", model.head)):
                for i, layer in enumerate(mlp.layers):
                    W, b = z[f"{tag}_W{i}"], z[f"{tag}_b{i}"]
                    if W.shape != layer.W.shape or b.shape != layer.b.shape:
                        raise ModelFormatError(
                            f"checkpoint {path}: {tag} layer {i} is "
                            f"{W.shape}, config implies {layer.W.shape}"
                        )
                    layer.W[:] = W
                    layer.b[:] = b
        except KeyError as exc:
            raise ModelFormatError(
                f"checkpoint {path} is missing array {exc}"
            ) from None
    return model, cfg


def _eval_model(model: JointModel, spec: LossSpec, encoding: str,
                teacher: Mlp, ds: Dataset, bits: BitCache,
                X_dense: Optional[np.ndarray], chunk: int = 2048):
    """(trainer EvalReport or None, projection EvalReport) over ds."""
    n = len(ds)
    sums = np.zeros(3)
    hits_t = {1: 0.0, 3: 0.0, 5: 0.0}
    hits_s = {1: 0.0, 3: 0.0, 5: 0.0}
    for lo in range(0, n, chunk):
        rows = np.arange(lo, min(n, lo + chunk))
        labels = ds.labels[rows]
        A = bits.acts(rows, encoding)
        probs_s = softmax(model.head.forward(A))
        if spec.teacher_in_play:
            logits_t = teacher.forward(X_dense[rows])
            probs_t = softmax(logits_t)
            soft = softmax(logits_t / spec.temperature)
        else:
            probs_t = soft = None
        theta, p, hat_p = _loss_pieces(probs_t, probs_s, soft, labels, spec)
        w = rows.size
        if probs_t is None:
            sums += np.array([0.0, 0.0, hat_p]) * w
        else:
            sums += np.array([theta, p, hat_p]) * w
            pk = precision_at(probs_t, labels)
            for k in hits_t:
                hits_t[k] += pk[k] * w
        pk = precision_at(probs_s, labels)
        for k in hits_s:
            hits_s[k] += pk[k] * w
    theta, p, hat_p = sums / n
    if not spec.teacher_in_play:
        theta = p = np.nan
    parts = _parts_from_pieces(theta, p, hat_p, spec)
    trainer_report = None
    if spec.teacher_in_play:
        trainer_report = EvalReport("trainer", hits_t[1] / n, hits_t[3] / n,
                                    hits_t[5] / n, parts)
    student_report = EvalReport("projection", hits_s[1] / n, hits_s[3] / n,
                                hits_s[5] / n, parts)
    return trainer_report, student_report


def _check_shared(cfgs: Sequence[RunConfig], options: TrainOptions):
    head = cfgs[0]
    shared = ("seed", "input_dim", "hidden_layers", "num_classes", "lambda1",
              "steps", "batch_size", "learning_rate", "eval_every")
    for other in cfgs[1:]:
        for key in shared:
            if getattr(other, key) != getattr(head, key):
                raise ConfigError(
                    f"shared-trainer run needs matching {key}: "
                    f"{getattr(head, key)} vs {getattr(other, key)}"
                )
    if options.couple_teacher and len(cfgs) > 1:
        raise ConfigError(
            "couple_teacher feeds student gradient into the trainer, so "
            "heads can no longer share one trainer; run them separately"
        )


class _Slot:
    def __init__(self, cfg: RunConfig, options: TrainOptions,
                 train_ds: Dataset, dev_ds: Optional[Dataset],
                 proj_cache: dict):
        self.cfg = cfg
        self.spec = LossSpec.from_config(cfg, options.use_kl,
                                         options.couple_teacher,
                                         options.loss_mask)
        self.model = build_model(cfg)
        key = (cfg.seed, cfg.T, cfg.d)
        if key not in proj_cache:
            proj_cache[key] = (
                BitCache(train_ds, self.model.projection),
                BitCache(dev_ds, self.model.projection) if dev_ds else None,
            )
        self.train_bits, self.dev_bits = proj_cache[key]

    def acts(self, rows) -> np.ndarray:
        return self.train_bits.acts(rows, self.cfg.bit_encoding)


def train_many(cfgs: Sequence[RunConfig], train_ds: Dataset,
               dev_ds: Optional[Dataset] = None,
               options: Optional[TrainOptions] = None,
               csv_paths: Optional[Sequence] = None,
               progress=None) -> List[TrainResult]:
    """Train several student heads against one shared trainer.

    Every cfg must agree on the seed and on everything that shapes the
    trainer and the batch stream; each head then sees exactly the
    trajectory it would have seen in its own solo run.
    """
    if not cfgs:
        raise ConfigError("no configurations to train")
    options = options or TrainOptions()
    _check_shared(list(cfgs), options)
    base = cfgs[0]

    proj_cache: dict = {}
    slots = [_Slot(cfg, options, train_ds, dev_ds, proj_cache) for cfg in cfgs]
    teacher = slots[0].model.trainer
    teacher_needed = any(s.spec.teacher_in_play for s in slots) \
        or options.pretrain_steps > 0

    logs = [_CsvLog(csv_paths[i] if csv_paths else None)
            for i in range(len(slots))]
    results = [TrainResult(cfg, slot.model)
               for cfg, slot in zip(cfgs, slots)]

    dev_dense = None
    if dev_ds is not None and teacher_needed:
        dev_dense = dense_inputs(dev_ds)

    rng = np.random.default_rng(
        np.random.SeedSequence([_BATCH_STREAM, base.seed]))
    n = len(train_ds)
    lr = base.learning_rate
    total_steps = options.pretrain_steps + base.steps

    def run_eval(step: int):
        if dev_ds is None:
            return
        for slot, log, result in zip(slots, logs, results):
            tr, sr = _eval_model(slot.model, slot.spec, slot.cfg.bit_encoding,
                                 teacher, dev_ds, slot.dev_bits, dev_dense)
            if tr is not None:
                result.history.append(log.row(step, tr))
            result.history.append(log.row(step, sr))
        if progress:
            progress(step, results)

    try:
        for step in range(1, total_steps + 1):
            rows = rng.integers(0, n, size=base.batch_size)
            labels = train_ds.labels[rows]
            Y = _onehot(labels, base.num_classes)
            pretraining = step <= options.pretrain_steps

            if teacher_needed:
                X = dense_inputs(train_ds, rows)
                logits_t = teacher.forward(X)
                probs_t = softmax(logits_t)
                dZt = slots[0].spec.l1 * (probs_t - Y) / rows.size
            else:
                logits_t = None

            if not pretraining:
                for slot in slots:
                    spec = slot.spec
                    A = slot.acts(rows)
                    probs_s = softmax(slot.model.head.forward(A))
                    if spec.teacher_in_play:
                        soft = softmax(logits_t / spec.temperature)
                        dZs = _student_logit_grad(probs_s, soft, Y, spec,
                                                  rows.size)
                        if spec.couple_teacher and spec.l2 > 0:
                            dZt = dZt + _imitation_pull(probs_s, soft, spec,
                                                        rows.size)
                    else:
                        dZs = _student_logit_grad(probs_s, None, Y, spec,
                                                  rows.size)
                    head_grads = slot.model.head.backward(dZs)
                    sgd_step(slot.model.head, head_grads, lr,
                             where=f"projection head (step {step})")

            if teacher_needed:
                t_grads = teacher.backward(dZt)
                sgd_step(teacher, t_grads, lr, where=f"trainer (step {step})")

            if step % base.eval_every == 0 or step == total_steps:
                run_eval(step)
    finally:
        for log in logs:
            log.close()

    # every slot whose loss saw the trainer reports the trained one
    for slot in slots[1:]:
        if slot.spec.teacher_in_play:
            slot.model.trainer = teacher
    return results


def train_joint(cfg: RunConfig, train_ds: Dataset,
                dev_ds: Optional[Dataset] = None,
                options: Optional[TrainOptions] = None,
                csv_path=None, progress=None) -> TrainResult:
    """Single-model convenience wrapper over train_many."""
    return train_many([cfg], train_ds, dev_ds, options,
                      [csv_path] if csv_path else None, progress)[0]


def evaluate(model: JointModel, ds: Dataset,
             spec: Optional[LossSpec] = None) -> Dict[str, EvalReport]:
    """{'trainer': ..., 'projection': ...} reports on a dataset."""
    spec = spec or LossSpec()
    encoding = model.head_config.bit_encoding
    bits = BitCache(ds, model.projection)
    X = dense_inputs(ds) if spec.teacher_in_play else None
    tr, sr = _eval_model(model, spec, encoding, model.trainer, ds, bits, X)
    out = {"projection": sr}
    if tr is not None:
        out["trainer"] = tr
    return out
