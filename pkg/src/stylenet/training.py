"""Training loop, evaluation metrics, and report serialization.

Training minimizes cross-entropy with Adam and is fully deterministic for a
fixed seed (shuffle permutations included). Evaluation runs batch-size-1
forward passes so the reported throughput matches a real-time, image-at-a-
time deployment.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .dataset import Dataset
from .errors import ConfigError, DataError, NumericError, TrainingDivergedError
from .models import Model
from .seeding import rng_for, thread_count


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 32
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs/batch_size must be positive: "
                              f"{self.epochs}/{self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.learning_rate}")
        return self


@dataclass
class TrainCurves:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)


class Adam:
    """Adam with the canonical constants; one state slot per parameter."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Forward passes with no recording; returns (N, K) logits."""
    outs = []
    for start in range(0, len(images), batch_size):
        outs.append(model.forward(Tensor(images[start:start + batch_size])).data)
    return np.concatenate(outs, axis=0)


def train(model: Model, train_set: Dataset, val_set: Dataset,
          config: TrainConfig) -> TrainCurves:
    """Train in place; returns per-epoch loss/accuracy curves for both sets.

    Divergence (non-finite loss or activations) aborts with
    TrainingDivergedError reporting the last epoch that completed.
    """
    config.validate()
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    k = model.config.num_classes
    for split_name, split in (("train", train_set), ("val", val_set)):
        if len(split) and (split.labels.min() < 0 or split.labels.max() >= k):
            raise DataError(f"{split_name} labels outside 0..{k - 1}")
    shuffle_rng = rng_for(config.seed, "shuffle")
    opt = Adam(model.params, config.learning_rate, config.beta1, config.beta2,
               config.eps)
    curves = TrainCurves()
    for epoch in range(config.epochs):
        order = (shuffle_rng.permutation(len(train_set)) if config.shuffle
                 else np.arange(len(train_set)))
        losses, correct = [], 0
        try:
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                x = Tensor(train_set.images[idx])
                y = train_set.labels[idx]
                with Tape() as tape:
                    logits = model.forward(x)
                    loss = ad.cross_entropy(logits, y)
                tape.backward(loss)
                opt.step()
                losses.append((loss.item(), len(idx)))
                correct += int((logits.data.argmax(axis=1) == y).sum())
        except NumericError as e:
            raise TrainingDivergedError(
                f"training diverged during epoch {epoch + 1}: {e}",
                last_good_epoch=epoch) from e
        total = sum(n for _, n in losses)
        curves.train_loss.append(sum(l * n for l, n in losses) / total)
        curves.train_acc.append(correct / total)
        if len(val_set):
            logits = predict_logits(model, val_set.images)
            curves.val_loss.append(
                ad.cross_entropy(Tensor(logits), val_set.labels).item())
            curves.val_acc.append(
                float((logits.argmax(axis=1) == val_set.labels).mean()))
    return curves


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    """Confusion matrix plus per-class and macro metrics.

    Matrix rows are ground truth, columns are predictions, in class-name
    order. All contents are plain tuples so two reports compare by value.
    """

    class_names: tuple
    confusion: tuple            # K rows of K int counts
    precision: tuple
    recall: tuple
    f1: tuple
    macro_precision: float
    macro_recall: float
    macro_f1: float
    samples: int
    throughput_ips: float


def _prf(confusion: np.ndarray):
    tp = np.diag(confusion).astype(float)
    col = confusion.sum(axis=0).astype(float)
    row = confusion.sum(axis=1).astype(float)
    precision = np.divide(tp, col, out=np.zeros_like(tp), where=col > 0)
    recall = np.divide(tp, row, out=np.zeros_like(tp), where=row > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    return precision, recall, f1


def report_from_predictions(truth: np.ndarray, predicted: np.ndarray,
                            class_names, samples: int = None,
                            throughput_ips: float = 0.0) -> EvalReport:
    k = len(class_names)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (truth, predicted), 1)
    precision, recall, f1 = _prf(confusion)
    return EvalReport(
        class_names=tuple(class_names),
        confusion=tuple(tuple(int(v) for v in row) for row in confusion),
        precision=tuple(float(v) for v in precision),
        recall=tuple(float(v) for v in recall),
        f1=tuple(float(v) for v in f1),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        samples=int(len(truth) if samples is None else samples),
        throughput_ips=float(throughput_ips),
    )


def evaluate(model: Model, test_set: Dataset) -> EvalReport:
    """Batch-1 evaluation; throughput is images per wall-clock second of
    pure forward passes."""
    if len(test_set) == 0:
        raise DataError("test set is empty")
    k = model.config.num_classes
    bad = np.nonzero((test_set.labels < 0) | (test_set.labels >= k))[0]
    if bad.size:
        raise DataError(f"label {test_set.labels[bad[0]]} out of range 0..{k - 1} "
                        f"for {test_set.paths[bad[0]]}")
    images = test_set.images

    def forward_one(i):
        return model.forward(Tensor(images[i:i + 1])).data[0]

    workers = min(thread_count(), len(images))
    start = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            logits = list(pool.map(forward_one, range(len(images))))
    else:
        logits = [forward_one(i) for i in range(len(images))]
    elapsed = time.perf_counter() - start
    predicted = np.stack(logits).argmax(axis=1)
    throughput = len(images) / elapsed if elapsed > 0 else 0.0
    return report_from_predictions(test_set.labels, predicted,
                                   test_set.class_names,
                                   throughput_ips=throughput)


# ---------------------------------------------------------------------------
# report serialization (line-oriented key=value / CSV hybrid)


def emit_report(report: EvalReport) -> str:
    lines = [f"classes={','.join(report.class_names)}",
             f"samples={report.samples}",
             f"throughput_ips={report.throughput_ips!r}"]
    for name, row in zip(report.class_names, report.confusion):
        lines.append(f"confusion.{name}={','.join(str(v) for v in row)}")
    for metric in ("precision", "recall", "f1"):
        values = getattr(report, metric)
        for name, v in zip(report.class_names, values):
            lines.append(f"{metric}.{name}={v!r}")
    lines.append(f"macro_precision={report.macro_precision!r}")
    lines.append(f"macro_recall={report.macro_recall!r}")
    lines.append(f"macro_f1={report.macro_f1!r}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> EvalReport:
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        values[key] = value
    try:
        names = tuple(values["classes"].split(","))
        confusion = tuple(tuple(int(v) for v in values[f"confusion.{n}"].split(","))
                          for n in names)
        metric = {m: tuple(float(values[f"{m}.{n}"]) for n in names)
                  for m in ("precision", "recall", "f1")}
        return EvalReport(
            class_names=names, confusion=confusion,
            precision=metric["precision"], recall=metric["recall"],
            f1=metric["f1"],
            macro_precision=float(values["macro_precision"]),
            macro_recall=float(values["macro_recall"]),
            macro_f1=float(values["macro_f1"]),
            samples=int(values["samples"]),
            throughput_ips=float(values["throughput_ips"]),
        )
    except KeyError as e:
        raise DataError(f"report text is missing field {e}") from None


def format_report(report: EvalReport) -> str:
    """Human-readable table form of an EvalReport."""
    names = report.class_names
    width = max(len(n) for n in names)
    lines = [f"samples: {report.samples}   "
             f"throughput: {report.throughput_ips:.1f} images/s",
             f"{'':{width}}  {'precision':>9}  {'recall':>9}  {'f1':>9}"]
    for i, n in enumerate(names):
        lines.append(f"{n:{width}}  {report.precision[i]:>9.4f}  "
                     f"{report.recall[i]:>9.4f}  {report.f1[i]:>9.4f}")
    lines.append(f"{'macro':{width}}  {report.macro_precision:>9.4f}  "
                 f"{report.macro_recall:>9.4f}  {report.macro_f1:>9.4f}")
    lines.append("confusion (rows=truth, cols=prediction):")
    header = " ".join(f"{n[:6]:>6}" for n in names)
    lines.append(f"{'':{width}}  {header}")
    for n, row in zip(names, report.confusion):
        lines.append(f"{n:{width}}  " + " ".join(f"{v:>6}" for v in row))
    return "\n".join(lines)
