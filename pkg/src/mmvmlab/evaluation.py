"""Evaluation: linear probes on unimodal latents, cross-modal coherence, reconstruction error."""
from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ParameterSet
from .data import MultimodalDataset
from .distributions import RngStream
from .errors import ContractViolation
from .model import MultimodalModel, conditional_generate, decode, encode, latent_paths
from .objective import ESTIMATOR_NOTES

COHERENCE_MIN_ACCURACY = 0.98
MAX_PROBE_SAMPLES = 10000


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class LinearClassifier:
    weight: np.ndarray  # (C, d)
    bias: np.ndarray  # (C,)
    mean: np.ndarray
    std: np.ndarray
    steps: int
    lr: float

    def scores(self, x: np.ndarray) -> np.ndarray:
        return ((np.asarray(x, dtype=np.float64) - self.mean) / self.std) @ self.weight.T + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        # argmax returns the first maximum, i.e. ties go to the lowest class index
        return np.argmax(self.scores(x), axis=1)

    def accuracy(self, x: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == np.asarray(labels)))


def _softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def fit_linear_classifier(latents, labels, seed: int = 0, n_classes: int | None = None,
                          steps: int = 2000, lr: float = 0.1,
                          max_samples: int = MAX_PROBE_SAMPLES) -> LinearClassifier:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardized with training statistics; weights start at zero.
    At most ``max_samples`` points are used (a seeded subsample if more).
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(labels, dtype=np.int64)
    if len(x) != len(y):
        raise ContractViolation(f"{len(x)} latents but {len(y)} labels")
    if len(np.unique(y)) < 2:
        raise ContractViolation("need at least two distinct classes to fit a classifier")
    n_classes = int(y.max()) + 1 if n_classes is None else int(n_classes)
    if len(x) > max_samples:
        keep = np.sort(np.random.default_rng(seed).choice(len(x), size=max_samples, replace=False))
        x, y = x[keep], y[keep]
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    xs = (x - mean) / std
    onehot = np.eye(n_classes)[y]
    W = np.zeros((xs.shape[1], n_classes))
    b = np.zeros(n_classes)
    n = len(xs)
    for _ in range(steps):
        g = (_softmax(xs @ W + b) - onehot) / n
        W -= lr * (xs.T @ g)
        b -= lr * g.sum(axis=0)
    return LinearClassifier(W.T.copy(), b, mean, std, steps, lr)


def posterior_means(model: MultimodalModel, m: int, x: np.ndarray) -> np.ndarray:
    return encode(model, m, x).mean.value


def latent_accuracy(model: MultimodalModel, train: MultimodalDataset, test: MultimodalDataset,
                    seed: int = 0) -> np.ndarray:
    """Per-modality test accuracy of linear probes on unimodal posterior means."""
    accs = []
    for m in range(model.config.n_modalities):
        clf = fit_linear_classifier(posterior_means(model, m, train.features[m]), train.labels,
                                    seed=seed, n_classes=train.n_classes)
        accs.append(clf.accuracy(posterior_means(model, m, test.features[m]), test.labels))
    return np.array(accs)


# ---------------------------------------------------------------------------
# coherence oracle


@dataclass
class CoherenceClassifier:
    """One MLP per modality trained on original features."""

    params: list[ParameterSet]
    widths: list[tuple[int, ...]]
    test_accuracy: np.ndarray
    train_accuracy: np.ndarray

    @property
    def valid(self) -> bool:
        return bool(np.all(self.test_accuracy >= COHERENCE_MIN_ACCURACY))

    def predict(self, m: int, x: np.ndarray) -> np.ndarray:
        logits = ad.forward_mlp(self.params[m].constants(), np.asarray(x, dtype=np.float64), self.widths[m])
        return np.argmax(logits.value, axis=1)

    def save(self, path) -> None:
        arrays = {f"{m}/{k}": v for m, p in enumerate(self.params) for k, v in p.items()}
        meta = {"widths": [list(w) for w in self.widths], "test_accuracy": self.test_accuracy.tolist(),
                "train_accuracy": self.train_accuracy.tolist(),
                "names": [p.names() for p in self.params]}
        np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> CoherenceClassifier:
        with np.load(path) as z:
            meta = json.loads(str(z["__meta__"]))
            params = [ParameterSet({k: z[f"{m}/{k}"] for k in names}) for m, names in enumerate(meta["names"])]
        return cls(params, [tuple(w) for w in meta["widths"]],
                   np.array(meta["test_accuracy"]), np.array(meta["train_accuracy"]))


def _cross_entropy(logits: ad.Node, onehot: np.ndarray) -> ad.Node:
    picked = ad.sum(ad.mul(logits, onehot), axis=-1)
    return ad.mean(ad.sub(ad.logsumexp(logits, axis=-1), picked))


def train_coherence_classifiers(train: MultimodalDataset, test: MultimodalDataset, seed: int = 0,
                                hidden: Sequence[int] = (128, 128), epochs: int = 30,
                                batch_size: int = 128, lr: float = 1e-3) -> CoherenceClassifier:
    """Fit a ReLU MLP per modality; stops early once training accuracy reaches 100%."""
    rng = RngStream(seed).split("coherence-classifier")
    onehot = np.eye(train.n_classes)[train.labels]
    params, widths, test_acc, train_acc = [], [], [], []
    for m, x in enumerate(train.features):
        w = (x.shape[1], *hidden, train.n_classes)
        p = ad.init_mlp(w, rng.split("init", m).generator)
        state = AdamState.for_params(p, lr=lr)
        for epoch in range(epochs):
            order = rng.split("shuffle", m, epoch).permutation(len(x))
            for start in range(0, len(x), batch_size):
                idx = order[start:start + batch_size]
                loss = _cross_entropy(ad.forward_mlp(p.leaves(), x[idx], w), onehot[idx])
                grads = p.zeros_like()
                grads.update(ad.backward(loss))
                ad.adam_step(p, grads, state)
            pred = np.argmax(ad.forward_mlp(p.constants(), x, w).value, axis=1)
            if np.all(pred == train.labels):
                break
        params.append(p)
        widths.append(w)
        train_acc.append(float(np.mean(pred == train.labels)))
        test_pred = np.argmax(ad.forward_mlp(p.constants(), test.features[m], w).value, axis=1)
        test_acc.append(float(np.mean(test_pred == test.labels)))
    return CoherenceClassifier(params, widths, np.array(test_acc), np.array(train_acc))


def coherence_matrix(model: MultimodalModel, test: MultimodalDataset, classifiers: CoherenceClassifier,
                     rng: RngStream | None = None, deterministic: bool = False) -> np.ndarray:
    """Entry ``[source, target]``: fraction of generated targets classified as the true class."""
    if not classifiers.valid:
        raise ContractViolation(
            f"coherence classifiers are not valid: test accuracy {classifiers.test_accuracy.tolist()} "
            f"below {COHERENCE_MIN_ACCURACY}")
    M = model.config.n_modalities
    out = np.zeros((M, M))
    for src in range(M):
        src_rng = None if rng is None else rng.split("coherence", src)
        for tgt in range(M):
            gen = conditional_generate(model, src, tgt, test.features[src], src_rng, deterministic)
            out[src, tgt] = np.mean(classifiers.predict(tgt, gen) == test.labels)
    return out


def reconstruction_error(model: MultimodalModel, test: MultimodalDataset,
                         rng: RngStream | None) -> tuple[np.ndarray, float]:
    """Per-modality MSE (per feature) under the strategy's reconstruction routing, and their sum.

    When a modality is decoded from several latent samples, the error is
    averaged over them. ``rng=None`` uses zero noise.
    """
    posteriors = [encode(model, m, x) for m, x in enumerate(test.features)]
    paths, _ = latent_paths(model, posteriors, rng)
    per_mod = []
    for m, x in enumerate(test.features):
        errs = [np.mean((x - decode(model, m, z).value) ** 2) for z in paths[m]]
        per_mod.append(float(np.mean(errs)))
    per_mod = np.array(per_mod)
    return per_mod, float(per_mod.sum())


# ---------------------------------------------------------------------------
# metrics record


@dataclass
class RunMetrics:
    strategy: str
    beta: float
    seed: int
    epoch: int
    recon: list[float]
    recon_total: float
    latent_acc: list[float]
    latent_acc_mean: float
    coherence: list[list[float]]
    coherence_offdiag_mean: float
    coherence_diag_mean: float
    coherence_valid: bool = True
    objective_trace: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> RunMetrics:
        return cls(**json.loads(Path(path).read_text()))

    def csv_row(self, status: str = "ok") -> list:
        M = len(self.recon)
        row = [self.strategy, repr(float(self.beta)), self.seed, self.epoch, repr(self.recon_total)]
        row += [repr(v) for v in self.recon]
        row += [repr(self.latent_acc_mean)] + [repr(v) for v in self.latent_acc]
        row += [repr(self.coherence_offdiag_mean)]
        row += [repr(self.coherence[i][j]) for i in range(M) for j in range(M)]
        return row + [status]


def csv_header(n_modalities: int) -> list[str]:
    M = n_modalities
    return (["strategy", "beta", "seed", "epoch", "recon_total"]
            + [f"recon_m{m}" for m in range(M)]
            + ["latent_acc_mean"] + [f"latent_acc_m{m}" for m in range(M)]
            + ["coherence_offdiag_mean"]
            + [f"coherence_{i}_{j}" for i in range(M) for j in range(M)]
            + ["status"])


def offdiag_mean(mat: np.ndarray) -> float:
    M = mat.shape[0]
    if M == 1:
        return float("nan")
    return float((mat.sum() - np.trace(mat)) / (M * (M - 1)))


def evaluate(model: MultimodalModel, train: MultimodalDataset, test: MultimodalDataset,
             classifiers: CoherenceClassifier, seed: int = 0, deterministic: bool = False,
             *, beta: float = float("nan"), epoch: int = 0, trace: list | None = None,
             config: dict | None = None) -> RunMetrics:
    rng = RngStream(seed).split("evaluation")
    recon, recon_total = reconstruction_error(model, test, None if deterministic else rng.split("recon"))
    acc = latent_accuracy(model, train, test, seed)
    coh = coherence_matrix(model, test, classifiers, rng.split("generate"), deterministic)
    return RunMetrics(
        strategy=model.config.strategy, beta=float(beta), seed=int(seed), epoch=int(epoch),
        recon=recon.tolist(), recon_total=recon_total,
        latent_acc=acc.tolist(), latent_acc_mean=float(acc.mean()),
        coherence=coh.tolist(), coherence_offdiag_mean=offdiag_mean(coh),
        coherence_diag_mean=float(np.trace(coh) / len(coh)),
        coherence_valid=classifiers.valid,
        objective_trace=list(trace or []), config=dict(config or {}),
        metadata={"representation": "posterior mean", "deterministic_generation": deterministic,
                  "probe": "multinomial logistic regression, 2000 GD steps, lr 0.1, standardized",
                  **ESTIMATOR_NOTES},
    )
