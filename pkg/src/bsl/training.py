"""Training loop, run configuration and checkpoints.

Every random choice in a step (sample order, flip, shuffle) is derived from
``(seed, epoch, sample index)``, so a run is reproduced from its config and
step counter alone; this is what makes checkpoint resume exact.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .evaluation import evaluate
from .models import ConfigurationError, build_model, to_tensor
from .objectives import DivergenceError, LossWeights, compute_losses
from .shuffle import ShuffleConfig, image_stream, shuffle_image

log = logging.getLogger(__name__)

__all__ = [
    "OptimizerConfig",
    "TapConfig",
    "AdversarialConfig",
    "RunConfig",
    "CheckpointError",
    "Trainer",
    "apply_overrides",
    "config_from_dict",
    "config_to_dict",
    "read_checkpoint_config",
    "run_id",
]

CHECKPOINT_FORMAT = "bsl-checkpoint/1"


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-4
    weight_decay: float = 1e-6


@dataclass(frozen=True)
class TapConfig:
    u: str | None = None
    v: str | None = None


@dataclass(frozen=True)
class AdversarialConfig:
    gradient_reversal: bool = False


@dataclass(frozen=True)
class RunConfig:
    shuffle: ShuffleConfig = field(default_factory=ShuffleConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    adversarial: AdversarialConfig = field(default_factory=AdversarialConfig)
    taps: TapConfig = field(default_factory=TapConfig)
    backbone: str = "xception"
    backbone_weights: str | None = None
    input_side: int = 224
    batch_size: int = 64
    max_steps: int = 1000
    eval_every: int = 0
    seed: int = 0
    flip: bool = True
    threshold: float = 0.5

    def __post_init__(self):
        if not self.optimizer.lr > 0:
            raise ConfigurationError(f"lr must be > 0, got {self.optimizer.lr}")
        if self.max_steps < 1:
            raise ConfigurationError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 0:
            raise ConfigurationError("eval_every must be >= 0")
        if self.optimizer.kind not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer.kind!r}")


def config_to_dict(cfg):
    d = dataclasses.asdict(cfg)
    d["shuffle"]["q_range"] = list(d["shuffle"]["q_range"])
    return d


def config_from_dict(d, cls=RunConfig):
    """Build a (nested) config dataclass, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ConfigurationError(f"expected a mapping for {cls.__name__}, got {type(d).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for name, value in d.items():
        default = known[name].default_factory() if known[name].default_factory is not \
            dataclasses.MISSING else known[name].default
        if dataclasses.is_dataclass(default):
            kw[name] = config_from_dict(value, type(default))
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc


def apply_overrides(d, overrides):
    """Apply ``dotted.key=value`` strings to a config dict (values parsed as JSON)."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigurationError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node, parts = d, key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigurationError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigurationError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return d


def run_id(config):
    """Short content hash of the effective config."""
    blob = json.dumps(config_to_dict(config), sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


class CheckpointError(OSError):
    pass


def _save_array(zf, name, arr):
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    zf.writestr(name, buf.getvalue())


def _load_array(zf, name):
    return np.load(io.BytesIO(zf.read(name)), allow_pickle=False)


class Trainer:
    """Joint training of backbone and heads on in-memory data.

    ``train_data`` / ``val_data`` are :class:`~bsl.datasets.ArrayDataset`.
    With a ``run_dir`` the trainer writes ``config.json``, ``run_id``,
    ``metrics.jsonl``, ``eval.jsonl`` and ``last.ckpt`` / ``best.ckpt``.
    """

    def __init__(self, config, train_data, val_data=None, run_dir=None):
        if len(train_data) == 0:
            raise ConfigurationError("training set is empty")
        if train_data.side != config.input_side:
            raise ConfigurationError(
                f"data side {train_data.side} != config input_side {config.input_side}")
        self.config = config
        self.train_data = train_data
        self.val_data = val_data
        self.run_dir = Path(run_dir) if run_dir else None
        torch.manual_seed(config.seed)
        self.model = build_model(config.backbone if config.backbone_weights is None else
                                 _weighted_backbone(config),
                                 config.shuffle.s_intra, config.shuffle.s_inter,
                                 config.input_side, train_data.images.shape[-1],
                                 config.taps.u, config.taps.v,
                                 config.adversarial.gradient_reversal)
        opt = config.optimizer
        if opt.kind == "adam":
            self.optimizer = torch.optim.Adam(self.model.parameters(), lr=opt.lr,
                                              weight_decay=opt.weight_decay)
        else:
            self.optimizer = torch.optim.SGD(self.model.parameters(), lr=opt.lr,
                                             weight_decay=opt.weight_decay)
        self.step = 0
        self.best = None
        self.history = []
        self.evals = []
        self._orders = {}
        if self.run_dir:
            self._init_run_dir()

    @property
    def run_id(self):
        return run_id(self.config)

    def _init_run_dir(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        with open(self.run_dir / "config.json", "w") as fh:
            json.dump(config_to_dict(self.config), fh, indent=2)
        (self.run_dir / "run_id").write_text(self.run_id + "\n")

    def _order(self, epoch):
        if epoch not in self._orders:
            rng = np.random.default_rng(np.random.SeedSequence([self.config.seed, 1, epoch]))
            if len(self._orders) > 2:
                self._orders.clear()
            self._orders[epoch] = rng.permutation(len(self.train_data))
        return self._orders[epoch]

    def batch_indices(self, step):
        """Dataset indices and epochs of the samples used at ``step`` (0-based)."""
        n, b = len(self.train_data), self.config.batch_size
        pos = np.arange(step * b, (step + 1) * b)
        epochs = pos // n
        idx = np.array([self._order(e)[p % n] for e, p in zip(epochs, pos)])
        return idx, epochs

    def prepare(self, indices, epochs):
        """Flip and shuffle each sample with its own stream; returns numpy arrays."""
        cfg = self.config
        imgs, marks, coords = [], [], []
        for i, e in zip(indices, epochs):
            rng = image_stream(cfg.seed, int(i), int(e))
            img = self.train_data.images[i]
            if cfg.flip and rng.random() < 0.5:
                img = img[:, ::-1]
            out = shuffle_image(img, cfg.shuffle, rng)
            imgs.append(out.image)
            marks.append(out.mark)
            coords.append(out.coords.M)
        return (np.stack(imgs), self.train_data.labels[indices],
                np.stack(marks).astype(np.float32), np.stack(coords))

    def train_step(self, images, labels, marks, coords):
        """One optimizer update on a prepared batch; returns the LossBundle."""
        w = self.config.weights
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        out = self.model(to_tensor(images))
        bundle = compute_losses(out, torch.as_tensor(labels), torch.from_numpy(marks),
                                torch.from_numpy(coords), w, step=self.step + 1)
        bundle.l_total.backward()
        # zero-weighted heads are frozen outright, weight decay included
        if w.alpha == 0:
            for p in self.model.adv_head.parameters():
                p.grad = None
        if w.beta == 0:
            for p in self.model.rest_head.parameters():
                p.grad = None
        self.optimizer.step()
        self.step += 1
        return bundle

    def advance(self):
        idx, epochs = self.batch_indices(self.step)
        try:
            bundle = self.train_step(*self.prepare(idx, epochs))
        except DivergenceError as exc:
            exc.context.update(seed=self.config.seed, indices=idx.tolist(),
                               epochs=epochs.tolist())
            if self.run_dir:
                with open(self.run_dir / "divergence.json", "w") as fh:
                    json.dump({"step": exc.step, **exc.context}, fh)
            raise
        rec = {"step": self.step, **bundle.as_floats(),
               "lr": self.optimizer.param_groups[0]["lr"]}
        self.history.append(rec)
        if self.run_dir:
            with open(self.run_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        return rec

    def evaluate(self, data=None, final=False):
        data = data if data is not None else self.val_data
        report = evaluate(self.model, data, threshold=self.config.threshold)
        rec = {"step": self.step, "acc": report.acc, "auc": report.auc, "n": report.n,
               "final": final}
        self.evals.append(rec)
        if self.run_dir:
            with open(self.run_dir / "eval.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        return report

    def train(self, max_steps=None):
        """Run until ``max_steps`` (default ``config.max_steps``); returns the loss history."""
        stop = max_steps if max_steps is not None else self.config.max_steps
        every = self.config.eval_every
        while self.step < stop:
            self.advance()
            if every and self.val_data is not None and self.step % every == 0:
                report = self.evaluate()
                if self.best is None or report.auc > self.best[0]:
                    self.best = (report.auc, self.step)
                    if self.run_dir:
                        self.save(self.run_dir / "best.ckpt")
        if stop == self.config.max_steps and every and self.val_data is not None:
            self.evaluate(final=True)
        if self.run_dir:
            self.save(self.run_dir / "last.ckpt")
        return self.history

    def save(self, path):
        """Write an archive: ``manifest.json`` plus one ``.npy`` per tensor."""
        path = Path(path)
        tmp = path.with_name(path.name + ".partial")
        opt_state = self.optimizer.state_dict()
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "step": self.step,
            "best": list(self.best) if self.best else None,
            "config": config_to_dict(self.config),
            "model": [],
            "optimizer": {"param_groups": opt_state["param_groups"], "state": {}},
        }
        try:
            with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
                for k, v in self.model.state_dict().items():
                    manifest["model"].append(k)
                    _save_array(zf, f"model/{k}.npy", v.detach().cpu().numpy())
                for pid, st in opt_state["state"].items():
                    entry = manifest["optimizer"]["state"][str(pid)] = {}
                    for k, v in st.items():
                        if torch.is_tensor(v):
                            entry[k] = {"array": f"optim/{pid}/{k}.npy"}
                            _save_array(zf, entry[k]["array"], v.cpu().numpy())
                        else:
                            entry[k] = {"value": v}
                _save_array(zf, "rng/torch.npy", torch.get_rng_state().numpy())
                zf.writestr("manifest.json", json.dumps(manifest, indent=1))
            os.replace(tmp, path)
        except OSError as exc:
            raise CheckpointError(f"checkpoint write failed; partial state at {tmp}: {exc}") from exc
        return path

    def load_state(self, path):
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: unrecognized checkpoint format")
            state = {k: torch.from_numpy(_load_array(zf, f"model/{k}.npy"))
                     for k in manifest["model"]}
            self.model.load_state_dict(state)
            groups = [{k: tuple(v) if isinstance(v, list) and k != "params" else v
                       for k, v in g.items()} for g in manifest["optimizer"]["param_groups"]]
            opt = {"param_groups": groups, "state": {}}
            for pid, entry in manifest["optimizer"]["state"].items():
                opt["state"][int(pid)] = {
                    k: torch.from_numpy(_load_array(zf, v["array"])) if "array" in v else v["value"]
                    for k, v in entry.items()}
            self.optimizer.load_state_dict(opt)
            torch.set_rng_state(torch.from_numpy(_load_array(zf, "rng/torch.npy")))
        self.step = manifest["step"]
        self.best = tuple(manifest["best"]) if manifest["best"] else None
        return manifest

    @classmethod
    def from_checkpoint(cls, path, train_data, val_data=None, run_dir=None):
        with zipfile.ZipFile(path) as zf:
            cfg = config_from_dict(json.loads(zf.read("manifest.json"))["config"])
        trainer = cls(cfg, train_data, val_data, run_dir)
        trainer.load_state(path)
        return trainer


def read_checkpoint_config(path):
    with zipfile.ZipFile(path) as zf:
        return config_from_dict(json.loads(zf.read("manifest.json"))["config"])


def _weighted_backbone(config):
    from .models import build_backbone
    return build_backbone(config.backbone, config.backbone_weights)
