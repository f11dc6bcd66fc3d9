"""Training recipe: Adam, plateau halving, speed perturbation, epoch loop."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from spgm import kernels
from spgm.checkpoint import save_checkpoint
from spgm.data import AudioBuffer, MixtureRecord, crop_group, read_manifest
from spgm.layers import ConfigError
from spgm.objective import si_sdr, upit_loss
from spgm.separator import SeparatorModel, separate_forward
from spgm.tensor import NonFiniteError, Tape, Tensor, mul, no_grad, stack, tsum

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
IMPROVEMENT_EPS = 1e-6


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 200
    lr0: float = 1.5e-4
    plateau_patience: int = 3
    lr_floor: float = 1.0e-8
    lr_factor: float = 0.5
    speed_perturb: tuple[float, float] = (0.95, 1.05)
    use_speed_perturb: bool = True
    batch_size: int = 1
    grad_clip_norm: float = 5.0
    crop_seconds: float = 10.0
    seed: int = 0
    pit_clamp: bool = True

    def __post_init__(self):
        self.speed_perturb = tuple(self.speed_perturb)
        if not 0 < self.lr_floor < self.lr0:
            raise ConfigError("need 0 < lr_floor < lr0")
        if not 0 < self.lr_factor < 1:
            raise ConfigError("need 0 < lr_factor < 1")
        lo, hi = self.speed_perturb
        if not 0.9 <= lo <= hi <= 1.1:
            raise ConfigError("speed perturbation range must lie in [0.9, 1.1]")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    epoch: int = 0                      # completed epochs
    lr: float = 1.5e-4
    best_valid_loss: float = math.inf
    epochs_since_improvement: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0
    stopped: bool = False

    def save(self, path, model: SeparatorModel) -> None:
        """Write moments and 64-bit parameters so a resumed run is bit-identical."""
        meta = {k: getattr(self, k) for k in
                ("epoch", "lr", "best_valid_loss", "epochs_since_improvement", "step",
                 "seed", "stopped")}
        meta["best_valid_loss"] = repr(self.best_valid_loss)
        arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
        for name, t in model.named_parameters():
            arrays[f"param/{name}"] = t.data
            if name in self.m:
                arrays[f"m/{name}"] = self.m[name]
                arrays[f"v/{name}"] = self.v[name]
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path, model: SeparatorModel) -> "TrainState":
        """Restore state and overwrite ``model`` parameters in place."""
        with np.load(path) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            meta["best_valid_loss"] = float(meta["best_valid_loss"])
            state = cls(**meta)
            for name, t in model.named_parameters():
                t.assign(z[f"param/{name}"])
                if f"m/{name}" in z:
                    state.m[name] = np.array(z[f"m/{name}"])
                    state.v[name] = np.array(z[f"v/{name}"])
        return state


# augmentation ---------------------------------------------------------------

def speed_perturb(x: AudioBuffer, factor: float) -> AudioBuffer:
    """Play ``x`` back ``factor`` times faster (windowed-sinc, 16 taps).

    Output length is ``round(T / factor)``; a tone at f Hz moves to f*factor Hz.
    """
    if not 0.9 <= factor <= 1.1:
        raise ConfigError(f"speed factor {factor} outside [0.9, 1.1]")
    if factor == 1.0:
        return AudioBuffer(x.samples.copy(), x.sample_rate)
    return AudioBuffer(kernels.sinc_resample(x.samples, factor, 8), x.sample_rate)


# optimizer ------------------------------------------------------------------

def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: TrainState,
              lr: float, clip_norm: float | None = None) -> float:
    """One bias-corrected Adam update; returns the pre-clip gradient norm."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} {params[name].shape}")
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if clip_norm is not None:
        grads, norm = clip_grad_norm(grads, clip_norm)
    state.step += 1
    c1 = 1.0 - ADAM_BETA1 ** state.step
    c2 = 1.0 - ADAM_BETA2 ** state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        params[name].assign(params[name].data - update)
    return norm


def plateau_step(state: TrainState, valid_loss: float, patience: int = 3,
                 factor: float = 0.5, floor: float = 1.0e-8) -> TrainState:
    """Halve lr once more than ``patience`` epochs pass without improvement.

    Sets ``state.stopped`` on the reduction that would take lr below ``floor``.
    """
    if not math.isfinite(valid_loss):
        raise ValueError("validation loss must be finite")
    if valid_loss < state.best_valid_loss - IMPROVEMENT_EPS:
        state.best_valid_loss = valid_loss
        state.epochs_since_improvement = 0
        return state
    state.epochs_since_improvement += 1
    if state.epochs_since_improvement > patience:
        state.lr *= factor
        state.epochs_since_improvement = 0
        if state.lr < floor:
            state.stopped = True
    return state


# loop -----------------------------------------------------------------------

class _Corpus:
    def __init__(self, records: list[MixtureRecord]):
        self.records = records
        self._cache: dict[int, tuple[AudioBuffer, list[AudioBuffer]]] = {}

    def __len__(self):
        return len(self.records)

    def get(self, i: int):
        if i not in self._cache:
            self._cache[i] = self.records[i].load()
        return self._cache[i]


def _as_corpus(manifest) -> _Corpus:
    if isinstance(manifest, _Corpus):
        return manifest
    if isinstance(manifest, (str, Path)):
        manifest = read_manifest(manifest)
    return _Corpus(list(manifest))


def utterance_loss(model: SeparatorModel, mix: AudioBuffer, srcs: list[AudioBuffer],
                   clamp: bool) -> Tensor:
    est = separate_forward(model, mix)
    refs = np.stack([s.samples for s in srcs])
    return upit_loss(est, refs, clamp=clamp).loss


def validation_loss(model: SeparatorModel, corpus, clamp: bool = True) -> float:
    corpus = _as_corpus(corpus)
    total = 0.0
    with no_grad():
        for i in range(len(corpus)):
            mix, srcs = corpus.get(i)
            total += utterance_loss(model, mix, srcs, clamp).item()
    return total / max(len(corpus), 1)


def _augment(mix, srcs, cfg: TrainConfig, rng: np.random.Generator):
    group = crop_group([mix, *srcs], cfg.crop_seconds, rng)
    if cfg.use_speed_perturb:
        factor = float(rng.uniform(*cfg.speed_perturb))
        group = [speed_perturb(b, factor) for b in group]
    return group[0], group[1:]


def train_epoch(model: SeparatorModel, corpus: _Corpus, cfg: TrainConfig,
                state: TrainState) -> float:
    epoch = state.epoch + 1
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(corpus))
    params = model.params
    losses = []
    for start in range(0, len(order), cfg.batch_size):
        batch = order[start:start + cfg.batch_size]
        with Tape() as tape:
            terms = []
            for i in batch:
                mix, srcs = corpus.get(int(i))
                mix, srcs = _augment(mix, srcs, cfg, rng)
                try:
                    terms.append(utterance_loss(model, mix, srcs, cfg.pit_clamp))
                except NonFiniteError as exc:
                    raise TrainingError(
                        f"non-finite loss on {corpus.records[int(i)].mixture_path}: {exc}") from exc
            loss = mul(tsum(stack(terms)), 1.0 / len(terms))
            losses.append(loss.item())
            if not loss.requires_grad:
                continue  # every utterance hit the clamp
            tape.backward(loss)
        grads = {name: t.grad for name, t in params.items() if t.grad is not None}
        adam_step(params, grads, state, state.lr, cfg.grad_clip_norm)
        for t in params.values():
            t.grad = None
    return float(np.mean(losses))


def fit(model: SeparatorModel, train_manifest, valid_manifest, cfg: TrainConfig,
        out_dir=None, state: TrainState | None = None, resume_from=None,
        max_epochs: int | None = None, on_epoch=None):
    """Train ``model`` in place; returns ``(model, history)``.

    ``history`` rows are ``(epoch, train_loss, valid_loss, lr)``. With
    ``out_dir`` the best model (``best.ckpt``), the latest state
    (``last.state.npz``) and ``history.csv`` are written after every epoch.
    ``max_epochs`` overrides ``cfg.max_epochs`` for partial runs.
    """
    train, valid = _as_corpus(train_manifest), _as_corpus(valid_manifest)
    if resume_from is not None:
        state = TrainState.load(resume_from, model)
    if state is None:
        state = TrainState(lr=cfg.lr0, seed=cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history = []
    if out is not None and resume_from is not None and (out / "history.csv").exists():
        with open(out / "history.csv", newline="") as fh:
            history = [(int(r["epoch"]), float(r["train_loss"]), float(r["valid_loss"]),
                        float(r["lr"])) for r in csv.DictReader(fh)][:state.epoch]
    stop_at = min(cfg.max_epochs, max_epochs or cfg.max_epochs)
    while state.epoch < stop_at and not state.stopped:
        lr_used = state.lr
        train_loss = train_epoch(model, train, cfg, state)
        valid_loss = validation_loss(model, valid, cfg.pit_clamp)
        improved = valid_loss < state.best_valid_loss - IMPROVEMENT_EPS
        plateau_step(state, valid_loss, cfg.plateau_patience, cfg.lr_factor, cfg.lr_floor)
        state.epoch += 1
        history.append((state.epoch, train_loss, valid_loss, lr_used))
        log.info("epoch %d train %.4f valid %.4f lr %.3g", state.epoch, train_loss,
                 valid_loss, lr_used)
        if out is not None:
            if improved:
                save_checkpoint(out / "best.ckpt", model)
            state.save(out / "last.state.npz", model)
            write_history(out / "history.csv", history)
        if on_epoch is not None:
            on_epoch(state, history)
    return model, history


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "valid_loss", "lr"])
        for row in history:
            w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


# evaluation -----------------------------------------------------------------

def utterance_sisdri(est: np.ndarray, refs: np.ndarray, mix: np.ndarray) -> float:
    """Mean SI-SDR improvement under the best estimate-to-reference assignment."""
    res = upit_loss(est, refs, clamp=False)
    gains = []
    for c, r in enumerate(res.permutation):
        base = si_sdr(mix, refs[r]).item()
        gains.append(res.per_pair_sisdr[c, r] - base)
    return float(np.mean(gains))


def evaluate_manifest(model: SeparatorModel, manifest) -> list[float]:
    corpus = _as_corpus(manifest)
    scores = []
    with no_grad():
        for i in range(len(corpus)):
            mix, srcs = corpus.get(i)
            est = separate_forward(model, mix).data
            scores.append(utterance_sisdri(est, np.stack([s.samples for s in srcs]), mix.samples))
    return scores
