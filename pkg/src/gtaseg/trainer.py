"""Training loops: supervised-only, Mean Teacher, and the gentle-teaching-assistant method.

One iteration of the assistant method, for labeled batch ``(xl, yl)`` and
unlabeled batch ``xu``:

1. the teacher labels ``xu``; labels are thresholded and re-weighted;
2. the assistant takes an SGD step on the weighted pseudo-label loss, then its
   extractor is blended into the student's by EMA;
3. the student takes an SGD step on the labeled loss and the teacher tracks
   the student by full-parameter EMA.

The student's labeled-loss gradient is evaluated at its pre-blend parameters,
so the predictor's update depends on the labeled batch alone.
"""

from __future__ import annotations

import dataclasses
import enum
import itertools
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import synthdata
from .errors import ConfigError, DataError, NumericError
from .numkernel import GradTape, SgdState, add, poly_lr, scale, sgd_step
from .pseudolabel import ReweightConfig, make_pseudo_labels, supervised_loss, unsupervised_loss
from .segmodel import ALL, ParamStore, Role, SegNetConfig, clone_params, forward, init_model, predict
from .transmission import transmit_representation, update_teacher

logger = logging.getLogger(__name__)


class Method(str, enum.Enum):
    SUPONLY = "suponly"
    MEAN_TEACHER = "mean_teacher"
    GTA = "gta"


class GtaData(str, enum.Enum):
    PSEUDO = "pseudo"
    LABELED = "labeled"
    BOTH = "both"


class StudentData(str, enum.Enum):
    LABELED = "labeled"
    PSEUDO = "pseudo"


class EmaScope(str, enum.Enum):
    EXTRACTOR = "extractor"
    ALL = "all"
    PREDICTOR = "predictor"


_ENUM_FIELDS = {
    "method": Method,
    "gta_data": GtaData,
    "student_data": StudentData,
    "ema_scope": EmaScope,
}

# fields that have no effect under a method; setting them is a config error
_GTA_ONLY = {"ema_scope", "gta_data", "student_data", "alpha_transmit", "tau", "reweight_enabled", "laplace_enabled"}
_SEMI = {"alpha", "quantile", "fixed_gamma"}
INAPPLICABLE = {
    Method.SUPONLY: _GTA_ONLY | _SEMI | {"mu"},
    Method.MEAN_TEACHER: _GTA_ONLY,
    Method.GTA: {"mu"},
}


@dataclass(frozen=True)
class TrainConfig:
    method: Method
    gta_data: GtaData = GtaData.PSEUDO
    student_data: StudentData = StudentData.LABELED
    ema_scope: EmaScope = EmaScope.EXTRACTOR
    alpha: float = 0.99
    alpha_transmit: float | None = None  # defaults to alpha
    tau: float = 1.0
    quantile: float = 0.2
    fixed_gamma: float | None = None
    mu: float = 1.0
    reweight_enabled: bool = True
    laplace_enabled: bool = True
    lr_init: float = 0.2
    weight_decay: float = 1e-4
    power: float = 0.9
    epochs: int = 30
    warmup_epochs: int = 1
    batch_l: int = 4
    batch_u: int = 16
    seed: int = 0
    # task and model
    data_seed: int = 0
    classes: int = 4
    image_size: int = 32
    n_labeled: int = 20
    n_unlabeled: int = 480
    n_heldout: int = 100
    hidden: tuple = (16, 32, 32)
    partition_boundary: int | None = None
    dataset: str | None = None  # path of a saved dataset; overrides generation

    def __post_init__(self):
        for name, cls in _ENUM_FIELDS.items():
            value = getattr(self, name)
            if not isinstance(value, cls):
                try:
                    object.__setattr__(self, name, cls(str(value).lower()))
                except ValueError:
                    choices = ", ".join(m.value for m in cls)
                    raise ConfigError(f"{name}={value!r} is not one of: {choices}") from None
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.alpha_transmit is not None and not 0.0 <= self.alpha_transmit <= 1.0:
            raise ConfigError(f"alpha_transmit must lie in [0, 1], got {self.alpha_transmit}")
        if self.tau < 0:
            raise ConfigError("tau must be non-negative")
        if not 0.0 <= self.quantile < 1.0:
            raise ConfigError("quantile must lie in [0, 1)")
        if self.warmup_epochs < 0 or self.epochs < 0:
            raise ConfigError("epochs and warmup_epochs must be non-negative")
        if self.epochs + self.warmup_epochs < 1:
            raise ConfigError("nothing to train: epochs + warmup_epochs == 0")
        if self.batch_l < 1 or self.batch_u < 1:
            raise ConfigError("batch sizes must be positive")
        if self.lr_init < 0 or self.weight_decay < 0:
            raise ConfigError("lr_init and weight_decay must be non-negative")
        self.model_config()  # validates classes / hidden / boundary

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def model_config(self) -> SegNetConfig:
        return SegNetConfig(classes=self.classes, hidden=self.hidden, partition_boundary=self.partition_boundary)

    def reweight_config(self) -> ReweightConfig:
        return ReweightConfig(self.reweight_enabled, self.tau if self.laplace_enabled else 0.0, self.quantile)

    @property
    def transmit_alpha(self):
        return self.alpha if self.alpha_transmit is None else self.alpha_transmit

    def as_dict(self):
        d = dataclasses.asdict(self)
        for name in _ENUM_FIELDS:
            d[name] = d[name].value
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class Models:
    student: ParamStore
    teacher: ParamStore | None = None
    gta: ParamStore | None = None

    def live(self) -> dict[str, ParamStore]:
        return {k: v for k, v in (("gta", self.gta), ("student", self.student), ("teacher", self.teacher)) if v is not None}


@dataclass
class StepMetrics:
    loss_l: float = 0.0
    loss_u: float = 0.0
    kept_fraction: float = 0.0
    mean_weight: float = 0.0
    degenerate: bool = False


@dataclass
class EpochRecord:
    epoch: int
    model: str
    miou: float
    loss_l: float
    loss_u: float
    lr: float
    kept_fraction: float
    mean_weight: float


@dataclass
class RunReport:
    config: dict
    seed: int
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    models: Models | None = field(default=None, repr=False, compare=False)

    def final_miou(self, model: str | None = None) -> float:
        """Last-epoch mIoU of ``model`` (default: the inference model)."""
        model = model or self.summary.get("final_model", "teacher")
        last = [r for r in self.records if r.model == model]
        if not last:
            raise KeyError(f"no records for model {model!r}")
        return last[-1].miou


def _check_finite(value: float, what: str, t: int):
    if not math.isfinite(value):
        raise NumericError(f"non-finite {what}", iteration=t)


def _loss_and_grads(params: ParamStore, loss_fn):
    tape = GradTape()
    watched = tape.watch_store(params)
    loss = loss_fn(lambda x: forward(params, x, tape, watched))
    return loss.item(), tape.backward(loss)


def _supervised_step(params, xl, yl, sgd, t):
    loss, grads = _loss_and_grads(params, lambda f: supervised_loss(f(xl), yl))
    _check_finite(loss, "supervised loss", t)
    sgd_step(params, grads, sgd, t)
    return loss


def gta_train_step(batch_l, batch_u, models: Models, config: TrainConfig, t: int, sgd: SgdState) -> StepMetrics:
    xl, yl = batch_l
    xu = batch_u
    m = StepMetrics()

    # Step 1: pseudo-labels from the teacher
    plmap = make_pseudo_labels(forward(models.teacher, xu), config.reweight_config(), config.fixed_gamma)
    m.kept_fraction = plmap.kept_fraction
    m.degenerate = plmap.degenerate
    n_kept = plmap.n_kept
    m.mean_weight = float(plmap.weights[plmap.kept].mean()) if n_kept else 0.0

    # Step 2: assistant update, then extractor transmission
    use_pseudo = config.gta_data in (GtaData.PSEUDO, GtaData.BOTH) and n_kept > 0
    use_labeled = config.gta_data in (GtaData.LABELED, GtaData.BOTH)
    if use_pseudo or use_labeled:
        def gta_loss(f):
            terms = []
            if use_pseudo:
                terms.append(unsupervised_loss(f(xu), plmap))
            if use_labeled:
                terms.append(supervised_loss(f(xl), yl))
            return terms[0] if len(terms) == 1 else add(*terms)

        loss, grads = _loss_and_grads(models.gta, gta_loss)
        _check_finite(loss, "assistant loss", t)
        sgd_step(models.gta, grads, sgd, t)
        m.loss_u = loss if config.gta_data != GtaData.LABELED else 0.0

    # Step 3 gradient taken before the blend so the predictor sees labeled data only
    if config.student_data == StudentData.LABELED:
        loss, s_grads = _loss_and_grads(models.student, lambda f: supervised_loss(f(xl), yl))
        m.loss_l = loss
    else:
        if n_kept:
            loss, s_grads = _loss_and_grads(models.student, lambda f: unsupervised_loss(f(xu), plmap))
        else:
            loss, s_grads = 0.0, {p.name: np.zeros_like(p.data) for p in models.student}
        m.loss_u = loss
    _check_finite(loss, "student loss", t)

    scope = {EmaScope.EXTRACTOR: Role.EXTRACTOR, EmaScope.PREDICTOR: Role.PREDICTOR, EmaScope.ALL: ALL}[config.ema_scope]
    transmit_representation(models.student, models.gta, config.transmit_alpha, scope)
    sgd_step(models.student, s_grads, sgd, t)
    update_teacher(models.teacher, models.student, config.alpha)
    return m


def mt_train_step(batch_l, batch_u, models: Models, config: TrainConfig, t: int, sgd: SgdState) -> StepMetrics:
    """Student minimises ``L_l + mu * L_u`` on unit-weight pseudo-labels; teacher is its EMA."""
    xl, yl = batch_l
    xu = batch_u
    m = StepMetrics()
    unit = ReweightConfig(enabled=False, tau=0.0, quantile=config.quantile)
    plmap = make_pseudo_labels(forward(models.teacher, xu), unit, config.fixed_gamma)
    m.kept_fraction = plmap.kept_fraction
    m.degenerate = plmap.degenerate
    m.mean_weight = 1.0 if plmap.n_kept else 0.0
    parts = {}

    def loss_fn(f):
        ll = supervised_loss(f(xl), yl)
        parts["l"] = ll.item()
        if config.mu == 0 or plmap.n_kept == 0:
            parts["u"] = 0.0
            return ll
        lu = unsupervised_loss(f(xu), plmap)
        parts["u"] = lu.item()
        return add(ll, scale(lu, config.mu))

    loss, grads = _loss_and_grads(models.student, loss_fn)
    _check_finite(loss, "student loss", t)
    sgd_step(models.student, grads, sgd, t)
    update_teacher(models.teacher, models.student, config.alpha)
    m.loss_l, m.loss_u = parts["l"], parts["u"]
    return m


def suponly_train_step(batch_l, models: Models, t: int, sgd: SgdState) -> StepMetrics:
    xl, yl = batch_l
    return StepMetrics(loss_l=_supervised_step(models.student, xl, yl, sgd, t))


# ---------------------------------------------------------------- data plumbing


def make_dataset(config: TrainConfig) -> synthdata.DatasetSplit:
    if config.dataset:
        from .harness.persist import load_dataset

        return load_dataset(config.dataset)
    n = config.n_labeled + config.n_unlabeled + config.n_heldout
    samples = synthdata.generate(config.data_seed, n, config.classes, config.image_size)
    return synthdata.split(samples, config.n_labeled, config.n_heldout, config.data_seed, config.classes)


def iterations_per_epoch(n_labeled: int, n_unlabeled: int, config: TrainConfig) -> int:
    if n_unlabeled > 0:
        return math.ceil(n_unlabeled / config.batch_u)
    return math.ceil(n_labeled / config.batch_l)


_WARMUP_STREAM, _LABELED_STREAM, _UNLABELED_STREAM = 0, 1, 2


def labeled_batches(n: int, batch: int, count: int, seed: int, epoch: int, stream: int = _LABELED_STREAM):
    """``count`` index batches cycling through reshuffled passes over ``n`` items."""
    rng = np.random.default_rng([seed, stream, epoch])
    stream = []
    while len(stream) < count * batch:
        stream.extend(rng.permutation(n).tolist())
    return [np.asarray(stream[i * batch:(i + 1) * batch]) for i in range(count)]


def unlabeled_batches(n: int, batch: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, _UNLABELED_STREAM, epoch]).permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def warmup(labeled_data, config: TrainConfig, sgd: SgdState | None = None, ipe: int | None = None) -> Models:
    """Train one model on labeled data for ``warmup_epochs`` and clone it into three roles.

    Warmup epochs run ``ipe`` iterations, the same length as a training epoch.
    """
    xl, yl = labeled_data
    if len(xl) == 0:
        raise DataError("warmup needs labeled data")
    if ipe is None:
        ipe = iterations_per_epoch(len(xl), config.n_unlabeled, config)
    if sgd is None:
        sgd = SgdState(config.lr_init, config.weight_decay, max(1, (config.warmup_epochs + config.epochs) * ipe), config.power)
    model = init_model(config.model_config(), config.seed)
    t = 0
    for epoch in range(config.warmup_epochs):
        for idx in labeled_batches(len(xl), config.batch_l, ipe, config.seed, epoch, _WARMUP_STREAM):
            _supervised_step(model, xl[idx], yl[idx], sgd, t)
            t += 1
    return Models(student=clone_params(model), teacher=clone_params(model), gta=clone_params(model))


def evaluate(params: ParamStore, images, masks, classes: int) -> float:
    return synthdata.miou(predict(params, images), masks, classes).miou


def train_run(dataset: synthdata.DatasetSplit, config: TrainConfig) -> RunReport:
    """Warmup then ``epochs`` epochs of the configured method; evaluates every live
    model on the held-out set after each epoch."""
    started = time.time()
    xl, yl = synthdata.stack(dataset.labeled)
    n_u = len(dataset.unlabeled) if config.method != Method.SUPONLY else 0
    if config.method != Method.SUPONLY and n_u == 0:
        raise DataError(f"method {config.method.value} needs unlabeled data")
    xu = synthdata.stack(dataset.unlabeled)[0] if n_u else None
    xh, yh = synthdata.stack(dataset.heldout)
    K = dataset.classes

    # SupOnly follows the same iteration schedule so lr and step counts match
    ipe = iterations_per_epoch(len(xl), len(dataset.unlabeled), config)
    total = (config.warmup_epochs + config.epochs) * ipe
    sgd = SgdState(config.lr_init, config.weight_decay, total, config.power)
    models = warmup((xl, yl), config, sgd, ipe)
    if config.method == Method.SUPONLY:
        models = Models(student=models.student)
    elif config.method == Method.MEAN_TEACHER:
        models = Models(student=models.student, teacher=models.teacher)

    report = RunReport(config=config.as_dict(), seed=config.seed)
    t = config.warmup_epochs * ipe
    degenerate = 0
    for epoch in range(1, config.epochs + 1):
        lbatches = labeled_batches(len(xl), config.batch_l, ipe, config.seed, epoch)
        ubatches = unlabeled_batches(n_u, config.batch_u, config.seed, epoch) if n_u else [None] * ipe
        sums = np.zeros(4)
        for lidx, uidx in zip(lbatches, ubatches):
            bl = (xl[lidx], yl[lidx])
            if config.method == Method.GTA:
                m = gta_train_step(bl, xu[uidx], models, config, t, sgd)
            elif config.method == Method.MEAN_TEACHER:
                m = mt_train_step(bl, xu[uidx], models, config, t, sgd)
            else:
                m = suponly_train_step(bl, models, t, sgd)
            degenerate += m.degenerate
            sums += (m.loss_l, m.loss_u, m.kept_fraction, m.mean_weight)
            t += 1
        loss_l, loss_u, kept, mw = (sums / len(lbatches)).tolist()
        lr = poly_lr(t, sgd)
        for name, params in models.live().items():
            score = evaluate(params, xh, yh, K)
            report.records.append(EpochRecord(epoch, name, score, loss_l, loss_u, lr, kept, mw))
        logger.info("epoch %d/%d %s", epoch, config.epochs,
                    " ".join(f"{r.model}={r.miou:.4f}" for r in report.records[-len(models.live()):]))

    final_model = "teacher" if models.teacher is not None else "student"
    report.summary = {
        "final_model": final_model,
        "final_miou": {r.model: r.miou for r in report.records[-len(models.live()):]} if report.records else {},
        "iterations": t,
        "degenerate_batches": degenerate,
        "seconds": round(time.time() - started, 3),
    }
    report.models = models
    return report


# ---------------------------------------------------------------- ablations

PRESETS = {
    "component": [
        ("SupOnly", {"method": "suponly"}),
        ("MT", {"method": "mean_teacher"}),
        ("MT+GTA", {"method": "gta", "reweight_enabled": False}),
        ("MT+GTA+reweight", {"method": "gta", "reweight_enabled": True}),
    ],
    "ema-scope": [
        ("EMA(all)", {"method": "gta", "ema_scope": "all"}),
        ("EMA(extractor)", {"method": "gta", "ema_scope": "extractor"}),
    ],
    "three-models": [
        ("GTA", {"method": "gta"}),
    ],
    "design": [
        ("gta=labeled,student=pseudo", {"method": "gta", "gta_data": "labeled", "student_data": "pseudo"}),
        ("gta=both,student=labeled", {"method": "gta", "gta_data": "both", "student_data": "labeled"}),
        ("gta=pseudo,student=labeled", {"method": "gta", "gta_data": "pseudo", "student_data": "labeled"}),
    ],
    "reweight": [
        ("no reweight", {"method": "gta", "reweight_enabled": False}),
        ("confidence reweight", {"method": "gta", "reweight_enabled": True, "laplace_enabled": False}),
        ("confidence reweight + laplace", {"method": "gta", "reweight_enabled": True, "laplace_enabled": True}),
    ],
    "alpha": [(f"alpha={a}", {"method": "gta", "alpha": a}) for a in (0.99, 0.999, 0.9999)],
    "warmup": [(f"warmup={w}", {"method": "gta", "warmup_epochs": w}) for w in (1, 2, 3)],
    "boundary": [(f"boundary={b}", {"method": "gta", "partition_boundary": b}) for b in (1, 2, 3, 4)],
}

AXIS_FIELDS = {
    "method", "ema_scope", "gta_data", "student_data", "reweight_enabled", "laplace_enabled",
    "alpha", "warmup_epochs", "partition_boundary",
}


def check_applicable(config: TrainConfig, touched) -> None:
    bad = sorted(set(touched) & INAPPLICABLE[config.method])
    if bad:
        raise ConfigError(f"method {config.method.value} is incompatible with {', '.join(bad)}")


def expand_axes(axes) -> list[tuple[str, dict]]:
    """Axes are a preset name, a list of ``(label, overrides)``, or a mapping of
    field -> values (cross product)."""
    if isinstance(axes, str):
        if axes not in PRESETS:
            raise ConfigError(f"unknown ablation preset {axes!r}; choose from {', '.join(PRESETS)}")
        return list(PRESETS[axes])
    if isinstance(axes, dict):
        unknown = sorted(set(axes) - AXIS_FIELDS)
        if unknown:
            raise ConfigError(f"not ablation axes: {', '.join(unknown)}")
        keys = list(axes)
        out = []
        for combo in itertools.product(*(axes[k] for k in keys)):
            overrides = dict(zip(keys, combo))
            out.append((",".join(f"{k}={v}" for k, v in overrides.items()), overrides))
        return out
    return list(axes)


def ablation_grid(base_config: TrainConfig, axes, seeds=(0, 1, 2), dataset=None, on_report=None):
    """Run every variant for every seed; returns ``[(label, seed, RunReport), ...]``.

    Every combination is validated before anything runs.
    """
    variants = []
    for label, overrides in expand_axes(axes):
        try:
            cfg = base_config.replace(**overrides)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        check_applicable(cfg, [k for k in overrides if k != "method"])
        variants.append((label, cfg))
    data = dataset if dataset is not None else make_dataset(base_config)
    results = []
    for label, cfg in variants:
        for seed in seeds:
            rep = train_run(data, cfg.replace(seed=seed))
            results.append((label, seed, rep))
            if on_report is not None:
                on_report(label, seed, rep)
    return results


def summarize(results) -> list[dict]:
    """One row per variant: mean final mIoU of each model over seeds."""
    rows: dict[str, dict] = {}
    for label, seed, rep in results:
        row = rows.setdefault(label, {"variant": label, "method": rep.config["method"], "seeds": [], "final": []})
        row["seeds"].append(seed)
        row["final"].append(rep.final_miou())
        for model, v in rep.summary["final_miou"].items():
            row.setdefault(model, []).append(v)
    out = []
    for row in rows.values():
        r = {"variant": row["variant"], "method": row["method"], "seeds": " ".join(map(str, row["seeds"])),
             "final_miou": float(np.mean(row["final"]))}
        for model in ("gta", "student", "teacher"):
            r[f"{model}_miou"] = float(np.mean(row[model])) if model in row else None
        out.append(r)
    return out
