"""Frozen-feature probes, cross-sensor retrieval and the simulated insertion gate."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dataio
from . import model as M
from .autodiff import Tensor

log = logging.getLogger(__name__)

SPLIT_PAIRS = {
    "unseen-grasps": ("probe-train", "probe-test"),
    "unseen-tools": ("unseen-tools-train", "unseen-tools-test"),
}
METHODS = ("cttp", "recon", "sup-class", "sup-pose", "random")
INSERTION_TOL = (3.0, 3.0, 5.0)
SCALINGS = ("isotropic", "per-dim", "none")


@dataclass(frozen=True)
class ProbeRegime:
    train_sensor: str
    eval_sensor: str
    split_pair: str

    def __post_init__(self):
        for s in (self.train_sensor, self.eval_sensor):
            if s not in ("gel", "membrane"):
                raise ValueError(f"unknown sensor {s!r}")
        if self.split_pair not in SPLIT_PAIRS:
            raise ValueError(f"unknown split pair {self.split_pair!r}; choose from {sorted(SPLIT_PAIRS)}")

    @property
    def across(self) -> bool:
        return self.train_sensor != self.eval_sensor

    @property
    def generalization(self) -> str:
        return "across" if self.across else "within"

    @property
    def splits(self):
        return SPLIT_PAIRS[self.split_pair]

    def as_dict(self):
        return {"train_sensor": self.train_sensor, "eval_sensor": self.eval_sensor,
                "split": self.split_pair, "generalization": self.generalization}


def default_regimes(train_sensor: str = "membrane"):
    other = "gel" if train_sensor == "membrane" else "membrane"
    return [ProbeRegime(train_sensor, ev, sp) for sp in SPLIT_PAIRS for ev in (train_sensor, other)]


@dataclass
class ProbeConfig:
    class_epochs: int = 200
    pose_epochs: int = 300
    class_lr: float = 1e-2
    pose_lr: float = 1e-3
    seed: int = 0
    # "isotropic": centre, then one scalar scale (keeps feature geometry);
    # "per-dim": z-score each feature; "none": raw features
    scaling: str = "isotropic"

    def __post_init__(self):
        if self.scaling not in SCALINGS:
            raise ValueError(f"unknown probe scaling {self.scaling!r}; choose from {SCALINGS}")


def tower_checksum(towers: dict) -> str:
    h = hashlib.sha256()
    for k, v in sorted(M.towers_state(towers).items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


class FeatureStore:
    """Backbone/projected features per (split, sensor), computed once with frozen towers."""

    def __init__(self, towers: dict, splits: dict):
        self.towers = towers
        self.splits = splits
        self._cache = {}

    def get(self, split: str, sensor: str) -> M.Embedding:
        key = (split, sensor)
        if key not in self._cache:
            tower = self.towers.get(sensor)
            if tower is None:
                raise KeyError(f"no {sensor} tower available")
            if tower.sensor != sensor:
                raise ValueError(f"tower tagged {tower.sensor!r} requested for {sensor!r} frames")
            if split not in self.splits:
                raise KeyError(f"split {split!r} not loaded")
            self._cache[key] = M.encode(self.splits[split].frames(sensor), sensor, tower)
        return self._cache[key]


# ----------------------------------------------------------------- probes

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x, scaling="isotropic"):
        """Statistics come from the probe's training features only."""
        x = np.asarray(x, dtype=np.float64)
        d = x.shape[1]
        if scaling == "none":
            return cls(np.zeros(d), np.ones(d))
        mean = x.mean(axis=0)
        if scaling == "per-dim":
            return cls(mean, np.maximum(x.std(axis=0), 1e-6))
        # root-mean-square per-feature spread, shared by every dimension
        rms = np.sqrt(np.mean((x - mean) ** 2))
        return cls(mean, np.full(d, max(rms, 1e-12)))

    def __call__(self, x):
        return ((np.asarray(x, dtype=np.float64) - self.mean) / self.std).astype(np.float32)


@dataclass
class ClassProbe:
    classes: np.ndarray
    scaler: Standardizer
    head: M.ClassifierHead
    train_accuracy: float = 0.0

    def logits(self, feats):
        with ad.no_grad():
            return self.head(Tensor(self.scaler(feats))).data

    def predict(self, feats):
        return self.classes[np.argmax(self.logits(feats), axis=1)]


@dataclass
class PoseProbe:
    scaler: Standardizer
    head: M.PoseHead
    losses: list = field(default_factory=list)

    def predict(self, feats):
        with ad.no_grad():
            return M.unscale_pose(self.head(Tensor(self.scaler(feats))).data)


def _full_batch_train(params, loss_fn, epochs, lr):
    opt = ad.Adam(params, lr=lr)
    losses = []
    for _ in range(epochs):
        with ad.Tape():
            loss = loss_fn()
            opt.zero_grad()
            ad.backward(loss)
        opt.step()
        losses.append(float(loss.data))
    return losses


def train_class_probe(feats, labels, cfg: ProbeConfig, tag="class") -> ClassProbe:
    """Single linear layer trained with cross-entropy on frozen features."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    y = np.searchsorted(classes, labels)
    scaler = Standardizer.fit(feats, cfg.scaling)
    x = Tensor(scaler(feats))
    head = M.ClassifierHead(x.shape[1], len(classes), ad.rng_stream(cfg.seed, f"probe/{tag}"))
    _full_batch_train(head.parameters(), lambda: M.ce_loss(head(x), y), cfg.class_epochs, cfg.class_lr)
    probe = ClassProbe(classes, scaler, head)
    probe.train_accuracy = float(np.mean(probe.predict(feats) == labels))
    return probe


def train_pose_probe(feats, poses, cfg: ProbeConfig, tag="pose") -> PoseProbe:
    """Two-hidden-layer MLP regressing (y, z, theta) from frozen features."""
    scaler = Standardizer.fit(feats, cfg.scaling)
    x = Tensor(scaler(feats))
    head = M.PoseHead(x.shape[1], ad.rng_stream(cfg.seed, f"probe/{tag}"))
    losses = _full_batch_train(head.parameters(), lambda: M.pose_mse(head(x), poses), cfg.pose_epochs, cfg.pose_lr)
    return PoseProbe(scaler, head, losses)


def pose_errors(pred, poses) -> np.ndarray:
    """Signed (y, z, theta) errors; theta is not wrapped (grasp ranges never wrap)."""
    return np.asarray(pred, dtype=np.float64)[:, :3] - np.asarray(poses, dtype=np.float64)[:, :3]


@dataclass
class PoseErrorSummary:
    y: dict
    z: dict
    theta: dict
    within_3mm: float
    within_5deg: float
    errors: np.ndarray

    @classmethod
    def from_errors(cls, errors):
        e = dataio.pose_entry("", {}, errors)
        return cls(e["y"], e["z"], e["theta"], e["within_3mm"], e["within_5deg"], np.asarray(errors))


class ProbeSuite:
    """Trains probes once per (split pair, train sensor) and evaluates them on either sensor."""

    def __init__(self, store: FeatureStore, cfg: ProbeConfig):
        self.store = store
        self.cfg = cfg
        self._class = {}
        self._pose = {}

    def _train_split(self, regime):
        return self.store.splits[regime.splits[0]]

    def class_probe(self, regime: ProbeRegime) -> ClassProbe:
        key = (regime.split_pair, regime.train_sensor)
        if key not in self._class:
            feats = self.store.get(regime.splits[0], regime.train_sensor).backbone
            labels = self._train_split(regime).tool_ids.astype(np.int64)
            self._class[key] = train_class_probe(feats, labels, self.cfg, tag=f"class/{regime.split_pair}")
        return self._class[key]

    def pose_probe(self, regime: ProbeRegime) -> PoseProbe:
        key = (regime.split_pair, regime.train_sensor)
        if key not in self._pose:
            feats = self.store.get(regime.splits[0], regime.train_sensor).backbone
            poses = self._train_split(regime).poses
            self._pose[key] = train_pose_probe(feats, poses, self.cfg, tag=f"pose/{regime.split_pair}")
        return self._pose[key]

    def eval_features(self, regime):
        # eval frames always go through the eval sensor's own tower
        return self.store.get(regime.splits[1], regime.eval_sensor).backbone

    def classify(self, regime: ProbeRegime):
        probe = self.class_probe(regime)
        test = self.store.splits[regime.splits[1]]
        pred = probe.predict(self.eval_features(regime))
        correct = int(np.sum(pred == test.tool_ids.astype(np.int64)))
        return correct, len(test), pred

    def pose(self, regime: ProbeRegime) -> PoseErrorSummary:
        probe = self.pose_probe(regime)
        test = self.store.splits[regime.splits[1]]
        return PoseErrorSummary.from_errors(pose_errors(probe.predict(self.eval_features(regime)), test.poses))


def _suite(towers, splits, cfg):
    return ProbeSuite(FeatureStore(towers, splits), cfg or ProbeConfig())


def class_probe(towers: dict, regime: ProbeRegime, splits: dict, cfg: ProbeConfig | None = None) -> float:
    correct, total, _ = _suite(towers, splits, cfg).classify(regime)
    return correct / total


def pose_probe(towers: dict, regime: ProbeRegime, splits: dict, cfg: ProbeConfig | None = None) -> PoseErrorSummary:
    return _suite(towers, splits, cfg).pose(regime)


# ----------------------------------------------------------------- retrieval

def recall_at_1(query, keys) -> float:
    """Fraction of rows whose cosine-nearest key row is the same index."""
    q = np.asarray(query, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if len(q) < 2 or q.shape != k.shape:
        raise ValueError("retrieval needs >= 2 paired rows of equal shape")
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    kn = k / np.maximum(np.linalg.norm(k, axis=1, keepdims=True), 1e-12)
    nearest = np.argmax(qn @ kn.T, axis=1)
    return float(np.mean(nearest == np.arange(len(q))))


def retrieval_from_embeddings(z_membrane, z_gel) -> dict:
    m2g = recall_at_1(z_membrane, z_gel)
    g2m = recall_at_1(z_gel, z_membrane)
    return {"membrane_to_gel": m2g, "gel_to_membrane": g2m, "recall_at_1": 0.5 * (m2g + g2m),
            "n": int(len(z_gel)), "chance": 1.0 / len(z_gel)}


def retrieval_recall(towers: dict, split: dataio.SplitData, store: FeatureStore | None = None,
                     split_name: str = "probe-test") -> dict:
    if len(split) < 2:
        raise ValueError("retrieval needs a split with at least 2 records")
    if store is not None:
        zm = store.get(split_name, "membrane").projected
        zg = store.get(split_name, "gel").projected
    else:
        zm = M.encode(split.membrane, "membrane", towers["membrane"]).projected
        zg = M.encode(split.gel, "gel", towers["gel"]).projected
    return retrieval_from_embeddings(zm, zg)


def mean_pair_cosines(z1, z2) -> tuple[float, float]:
    """Mean cosine of positive pairs and of all off-diagonal (negative) pairs."""
    a = np.asarray(z1, dtype=np.float64)
    b = np.asarray(z2, dtype=np.float64)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    s = a @ b.T
    n = len(s)
    pos = float(np.trace(s) / n)
    neg = float((s.sum() - np.trace(s)) / (n * n - n))
    return pos, neg


# ----------------------------------------------------------------- insertion gate

def insertion_outcomes(pred_class, true_class, pose_err, tolerances=INSERTION_TOL) -> dict:
    """Per-trial success = right tool AND |dy|, |dz| <= tol_mm AND |dtheta| <= tol_deg."""
    pred_class = np.asarray(pred_class)
    true_class = np.asarray(true_class)
    e = np.abs(np.asarray(pose_err, dtype=np.float64))
    ty, tz, tth = tolerances
    class_ok = pred_class == true_class
    pose_ok = (e[:, 0] <= ty) & (e[:, 1] <= tz) & (e[:, 2] <= tth)
    success = class_ok & pose_ok
    trials = [
        {"trial": i, "true_tool": int(true_class[i]), "pred_tool": int(pred_class[i]),
         "dy": float(pose_err[i][0]), "dz": float(pose_err[i][1]), "dtheta": float(pose_err[i][2]),
         "class_ok": bool(class_ok[i]), "pose_ok": bool(pose_ok[i]), "success": bool(success[i])}
        for i in range(len(true_class))
    ]
    n = len(true_class)
    return {
        "success_rate": float(success.mean()) if n else 0.0,
        "successes": int(success.sum()), "trials": n,
        "class_correct": int(class_ok.sum()),
        "failures_class": int((~class_ok).sum()),
        "failures_pose_only": int((class_ok & ~pose_ok).sum()),
        "tolerances": {"y_mm": ty, "z_mm": tz, "theta_deg": tth},
        "log": trials,
    }


def insertion_gate(suite: ProbeSuite, regime: ProbeRegime, tolerances=INSERTION_TOL) -> dict:
    if suite is None:
        raise ValueError("insertion gate needs trained probes")
    test = suite.store.splits[regime.splits[1]]
    _, _, pred = suite.classify(regime)
    err = suite.pose(regime).errors
    return insertion_outcomes(pred, test.tool_ids.astype(np.int64), err, tolerances)


# ----------------------------------------------------------------- full evaluation

def evaluate_method(method: str, towers: dict, splits: dict, cfg: ProbeConfig,
                    regimes=None, tasks=("class", "pose", "retrieval", "insertion"),
                    insertion_regime: ProbeRegime | None = None) -> list:
    """All requested entries for one checkpoint."""
    before = tower_checksum(towers)
    suite = _suite(towers, splits, cfg)
    regimes = regimes or default_regimes()
    out = []
    for regime in regimes:
        if "class" in tasks:
            correct, total, _ = suite.classify(regime)
            probe = suite.class_probe(regime)
            out.append(dataio.class_entry(method, regime.as_dict(), correct, total,
                                          chance=1.0 / len(probe.classes),
                                          train_accuracy=probe.train_accuracy))
        if "pose" in tasks:
            summary = suite.pose(regime)
            out.append(dataio.pose_entry(method, regime.as_dict(), summary.errors))
    if "retrieval" in tasks:
        r = retrieval_recall(towers, splits["probe-test"], suite.store)
        out.append({"task": "retrieval", "method": method, "split": "probe-test", **r})
    if "insertion" in tasks:
        ins_regime = insertion_regime or ProbeRegime("membrane", "gel", "unseen-tools")
        res = insertion_gate(suite, ins_regime)
        out.append({"task": "insertion", "method": method, **ins_regime.as_dict(), **res})
    if tower_checksum(towers) != before:
        raise RuntimeError("probe training modified tower parameters")
    return out


def full_eval(checkpoints: dict, splits: dict, cfg: ProbeConfig | None = None,
              train_sensor: str = "membrane") -> dict:
    """Every method x regime x task plus retrieval and insertion, as one report."""
    missing = [m for m in METHODS if m not in checkpoints]
    if missing:
        raise ValueError(f"full evaluation needs checkpoints for: {', '.join(missing)}")
    cfg = cfg or ProbeConfig()
    results = []
    for method in METHODS:
        towers = M.load_towers(checkpoints[method])
        log.info("evaluating %s", method)
        results += evaluate_method(method, towers, splits, cfg, default_regimes(train_sensor))
    return dataio.emit_report(results, {"methods": list(METHODS), "probe": cfg.__dict__})


def select(report: dict, **match) -> list:
    """Entries of a report whose fields equal ``match``."""
    return [r for r in report["results"] if all(r.get(k) == v for k, v in match.items())]
