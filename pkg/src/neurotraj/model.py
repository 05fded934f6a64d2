"""Driving model: potential-map encoder, sinusoidal trajectory head, training.

The encoder runs each map of the window through a strided conv stack,
projects to a feature vector, and folds the frames oldest-to-newest
through a GRU; the condition is [v0 ; r]. A dense head maps the
condition to the basis coefficients of a ContinuousTrajectory. The loss
supervises position, velocity, and acceleration at the label times, with
gradients flowing through the exact basis derivatives.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import net
from .episodes import Episode, HORIZON, N_SAMPLES, SAMPLE_DT, WINDOW
from .net import Chain, LayerSpec, ParamStore
from .trajectory import (
    BASIS_COS,
    BASIS_LEAKY_RELU,
    ContinuousTrajectory,
    backward_through_eval,
)

LABEL_TIMES = np.round(np.arange(N_SAMPLES) * SAMPLE_DT, 10)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    rows: int = 64
    cols: int = 64
    window: int = WINDOW
    conv_channels: tuple[int, ...] = (8, 16, 32, 64)
    feature_dim: int = 128
    head_widths: tuple[int, ...] = (256, 256)
    n_basis: int = 32
    horizon: float = HORIZON
    freq_scale: float = 20.0
    basis: str = BASIS_COS
    zero_v0: bool = False          # "no v0" ablation: blank the speed slot
    blank_maps: bool = False       # "no intention" ablation: zero windows

    @property
    def condition_dim(self) -> int:
        return 1 + self.feature_dim

    @property
    def head_out_dim(self) -> int:
        return 4 * self.n_basis + 2

    def conv_out_shape(self) -> tuple[int, int, int]:
        h, w = self.rows, self.cols
        for _ in self.conv_channels:
            h = (h + 2 - 4) // 2 + 1
            w = (w + 2 - 4) // 2 + 1
            if h < 1 or w < 1:
                raise ModelError("conv stack shrinks the grid below 1 cell")
        return self.conv_channels[-1], h, w

    def to_json(self) -> dict:
        return {
            "rows": self.rows, "cols": self.cols, "window": self.window,
            "conv_channels": list(self.conv_channels),
            "feature_dim": self.feature_dim,
            "head_widths": list(self.head_widths),
            "n_basis": self.n_basis, "horizon": self.horizon,
            "freq_scale": self.freq_scale, "basis": self.basis,
            "zero_v0": self.zero_v0, "blank_maps": self.blank_maps,
        }

    @staticmethod
    def from_json(doc: dict) -> "ModelConfig":
        return ModelConfig(
            rows=doc["rows"], cols=doc["cols"], window=doc["window"],
            conv_channels=tuple(doc["conv_channels"]),
            feature_dim=doc["feature_dim"],
            head_widths=tuple(doc["head_widths"]),
            n_basis=doc["n_basis"], horizon=doc["horizon"],
            freq_scale=doc["freq_scale"], basis=doc["basis"],
            zero_v0=doc.get("zero_v0", False),
            blank_maps=doc.get("blank_maps", False),
        )

    @staticmethod
    def tiny() -> "ModelConfig":
        """Small enough for exhaustive finite-difference gradient checks."""
        return ModelConfig(rows=8, cols=8, conv_channels=(4, 8), feature_dim=8,
                           head_widths=(16, 16), n_basis=4)


@dataclass(frozen=True)
class LossConfig:
    vel_weight: float = 0.5
    acc_weight: float = 0.1
    sample_times: np.ndarray = field(default_factory=lambda: LABEL_TIMES.copy())

    def __post_init__(self) -> None:
        if self.vel_weight < 0 or self.acc_weight < 0:
            raise ModelError("loss weights must be nonnegative")


ABLATIONS = ("none", "no-intention", "no-v0", "no-cos", "no-hos", "big-hos")


def apply_ablation(config: ModelConfig, loss_cfg: LossConfig,
                   ablation: str) -> tuple[ModelConfig, LossConfig]:
    """Return (config, loss config) adjusted for one named ablation."""
    if ablation not in ABLATIONS:
        raise ModelError(f"unknown ablation {ablation!r}; pick one of {ABLATIONS}")
    if ablation == "no-intention":
        return replace(config, blank_maps=True), loss_cfg
    if ablation == "no-v0":
        return replace(config, zero_v0=True), loss_cfg
    if ablation == "no-cos":
        return replace(config, basis=BASIS_LEAKY_RELU), loss_cfg
    if ablation == "no-hos":
        return config, replace(loss_cfg, vel_weight=0.0, acc_weight=0.0)
    if ablation == "big-hos":
        return config, replace(loss_cfg, vel_weight=loss_cfg.vel_weight * 10,
                               acc_weight=loss_cfg.acc_weight * 10)
    return config, loss_cfg


class DrivingModel:
    """Encoder + head over a shared ParamStore; forward is pure."""

    def __init__(self, config: ModelConfig, store: ParamStore | None = None):
        self.config = config
        channels = (1,) + tuple(config.conv_channels)
        conv_layers: list[LayerSpec] = []
        for i in range(len(config.conv_channels)):
            conv_layers.append(LayerSpec("conv2d", name=f"conv{i + 1}",
                                         in_channels=channels[i],
                                         out_channels=channels[i + 1]))
            conv_layers.append(LayerSpec("leaky_relu"))
        c, h, w = config.conv_out_shape()
        conv_layers.append(LayerSpec("flatten"))
        conv_layers.append(LayerSpec("dense", name="proj",
                                     in_features=c * h * w,
                                     out_features=config.feature_dim))
        self.conv_chain = Chain(conv_layers)

        head_layers: list[LayerSpec] = []
        widths = (config.condition_dim,) + tuple(config.head_widths)
        for i in range(len(config.head_widths)):
            head_layers.append(LayerSpec("dense", name=f"head{i + 1}",
                                         in_features=widths[i],
                                         out_features=widths[i + 1]))
            head_layers.append(LayerSpec("leaky_relu"))
        head_layers.append(LayerSpec("dense", name="out",
                                     in_features=widths[-1],
                                     out_features=config.head_out_dim))
        self.head_chain = Chain(head_layers)

        if store is None:
            store = ParamStore()
        self.store = store

    def init_params(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        self.conv_chain.init_params(self.store, rng)
        net.init_gru_params(self.store, "gru", self.config.feature_dim,
                            self.config.feature_dim, rng)
        self.head_chain.init_params(self.store, rng)

    # -- forward -----------------------------------------------------------

    def _window_tensor(self, windows: np.ndarray) -> np.ndarray:
        cfg = self.config
        w = np.asarray(windows, dtype=np.float64)
        if w.ndim == 3:
            w = w[None]
        if w.shape[1:] != (cfg.window, cfg.rows, cfg.cols):
            raise ModelError(
                f"window tensor {w.shape[1:]} does not match "
                f"({cfg.window}, {cfg.rows}, {cfg.cols})"
            )
        if cfg.blank_maps:
            w = np.zeros_like(w)
        return w

    def encode_batch(self, windows: np.ndarray, v0s: np.ndarray):
        """Conditions (B, 1 + feature) plus caches for backward."""
        cfg = self.config
        w = self._window_tensor(windows)
        b = w.shape[0]
        frames = w.reshape(b * cfg.window, 1, cfg.rows, cfg.cols)
        feats, conv_caches = self.conv_chain.forward(self.store, frames)
        feats = feats.reshape(b, cfg.window, cfg.feature_dim)
        h = np.zeros((b, cfg.feature_dim))
        gru_caches = []
        for k in range(cfg.window):
            h, cache = net.gru_cell_forward(feats[:, k, :], h, self.store, "gru")
            gru_caches.append(cache)
        v0_col = np.zeros((b, 1)) if cfg.zero_v0 else \
            np.asarray(v0s, dtype=np.float64).reshape(b, 1)
        cond = np.concatenate([v0_col, h], axis=1)
        return cond, (conv_caches, gru_caches, b)

    def encode(self, window_maps, v0: float) -> np.ndarray:
        """Condition vector for one window of PotentialMaps (or array)."""
        if not isinstance(window_maps, np.ndarray):
            window_maps = np.stack([m.values for m in window_maps])
        cond, _ = self.encode_batch(window_maps[None], np.array([v0]))
        return cond[0]

    def encode_backward(self, grad_cond: np.ndarray, caches) -> None:
        conv_caches, gru_caches, b = caches
        cfg = self.config
        grad_h = grad_cond[:, 1:]
        grad_feats = np.zeros((b, cfg.window, cfg.feature_dim))
        for k in range(cfg.window - 1, -1, -1):
            grad_x, grad_h = net.gru_cell_backward(grad_h, gru_caches[k], self.store)
            grad_feats[:, k, :] = grad_x
        self.conv_chain.backward(
            self.store, conv_caches,
            grad_feats.reshape(b * cfg.window, cfg.feature_dim),
            need_input_grad=False)

    def head_forward(self, cond: np.ndarray):
        out, caches = self.head_chain.forward(self.store, np.atleast_2d(cond))
        return out, caches

    def coefficients(self, head_out: np.ndarray):
        """Split raw head outputs into (omega, phi, wx, wy, bx, by)."""
        m = self.config.n_basis
        raw = np.atleast_2d(head_out)
        omega = net.softplus(raw[:, :m]) * self.config.freq_scale
        phi = raw[:, m:2 * m]
        wx = raw[:, 2 * m:3 * m]
        wy = raw[:, 3 * m:4 * m]
        bx = raw[:, 4 * m]
        by = raw[:, 4 * m + 1]
        return omega, phi, wx, wy, bx, by

    def trajectory_from_head(self, head_row: np.ndarray) -> ContinuousTrajectory:
        omega, phi, wx, wy, bx, by = self.coefficients(head_row[None])
        return ContinuousTrajectory(
            omega=omega[0], phi=phi[0], wx=wx[0], wy=wy[0],
            bx=float(bx[0]), by=float(by[0]),
            horizon=self.config.horizon, basis=self.config.basis,
        )

    def predict(self, cond: np.ndarray) -> ContinuousTrajectory:
        out, _ = self.head_forward(cond)
        return self.trajectory_from_head(out[0])

    def plan(self, window_maps, v0: float) -> ContinuousTrajectory:
        """encode + predict in one call (the planner entry point)."""
        return self.predict(self.encode(window_maps, v0))

    # -- loss -----------------------------------------------------------------

    def loss_batch(self, windows: np.ndarray, v0s: np.ndarray,
                   labels: dict[str, np.ndarray], loss_cfg: LossConfig,
                   with_grads: bool = True) -> float:
        """Mean high-order imitation loss over a batch; optionally backprop.

        ``labels`` holds "pos", "vel", "acc" arrays of shape (B, K, 2)
        sampled at loss_cfg.sample_times.
        """
        times = loss_cfg.sample_times
        k_n = len(times)
        cond, enc_caches = self.encode_batch(windows, v0s)
        head_out, head_caches = self.head_forward(cond)
        b = head_out.shape[0]
        m = self.config.n_basis

        total = 0.0
        grad_head = np.zeros_like(head_out) if with_grads else None
        for i in range(b):
            traj = self.trajectory_from_head(head_out[i])
            pos, vel, acc = traj.eval_arrays(times)
            r_pos = pos - labels["pos"][i]
            r_vel = vel - labels["vel"][i]
            r_acc = acc - labels["acc"][i]
            total += float(
                np.sum(r_pos**2)
                + loss_cfg.vel_weight * np.sum(r_vel**2)
                + loss_cfg.acc_weight * np.sum(r_acc**2)
            ) / k_n
            if not with_grads:
                continue
            scale = 2.0 / (k_n * b)
            g = backward_through_eval(
                traj, times,
                grad_pos=scale * r_pos,
                grad_vel=scale * loss_cfg.vel_weight * r_vel if loss_cfg.vel_weight else None,
                grad_acc=scale * loss_cfg.acc_weight * r_acc if loss_cfg.acc_weight else None,
            )
            raw_omega = head_out[i, :m]
            grad_head[i, :m] = g.omega * net.softplus_grad(raw_omega) * self.config.freq_scale
            grad_head[i, m:2 * m] = g.phi
            grad_head[i, 2 * m:3 * m] = g.wx
            grad_head[i, 3 * m:4 * m] = g.wy
            grad_head[i, 4 * m] = g.bx
            grad_head[i, 4 * m + 1] = g.by
        if with_grads:
            grad_cond = self.head_chain.backward(self.store, head_caches, grad_head)
            self.encode_backward(grad_cond, enc_caches)
        return total / b

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        layers = ([spec.to_json() for spec in self.conv_chain.layers]
                  + [{"kind": "gru_cell", "name": "gru",
                      "hidden": self.config.feature_dim}]
                  + [spec.to_json() for spec in self.head_chain.layers])
        net.save_params(path, self.store, layers=layers, config=self.config.to_json())

    @staticmethod
    def load(path) -> "DrivingModel":
        store, _, config = net.load_params(path)
        return DrivingModel(ModelConfig.from_json(config), store=store)


def loss_single(model: DrivingModel, traj: ContinuousTrajectory,
                ep: Episode, loss_cfg: LossConfig) -> float:
    """Loss of one already-predicted trajectory against an episode label."""
    times = ep.times
    pos, vel, acc = traj.eval_arrays(times)
    return float(np.mean(
        np.sum((pos - ep.positions) ** 2, axis=1)
        + loss_cfg.vel_weight * np.sum((vel - ep.velocities) ** 2, axis=1)
        + loss_cfg.acc_weight * np.sum((acc - ep.accelerations) ** 2, axis=1)
    ))


# --- dataset plumbing ----------------------------------------------------------

def episodes_to_arrays(episodes: list[Episode]) -> dict[str, np.ndarray]:
    windows = np.stack([[m.values for m in ep.map_window] for ep in episodes])
    return {
        "windows": windows,
        "v0": np.array([ep.v0 for ep in episodes]),
        "pos": np.stack([ep.positions for ep in episodes]),
        "vel": np.stack([ep.velocities for ep in episodes]),
        "acc": np.stack([ep.accelerations for ep in episodes]),
        "speed": np.stack([ep.speeds for ep in episodes]),
    }


@dataclass
class TrainResult:
    model: DrivingModel
    log: list[dict]
    best_val_loss: float


def evaluate_ade(model: DrivingModel, data: dict[str, np.ndarray]) -> float:
    """Mean displacement error over a dataset (quick validation metric)."""
    cond, _ = model.encode_batch(data["windows"], data["v0"])
    head_out, _ = model.head_forward(cond)
    total, n = 0.0, len(head_out)
    for i in range(n):
        traj = model.trajectory_from_head(head_out[i])
        pos, _, _ = traj.eval_arrays(LABEL_TIMES)
        total += float(np.mean(np.linalg.norm(pos - data["pos"][i], axis=1)))
    return total / n


def train(episodes: list[Episode], config: ModelConfig,
          loss_cfg: LossConfig | None = None, ablation: str = "none",
          seed: int = 0, max_epochs: int = 20, batch_size: int = 32,
          lr: float = 3e-4, val_fraction: float = 0.1, patience: int = 10,
          log_path=None, progress=None) -> TrainResult:
    """Mini-batch Adam imitation training, deterministic per seed."""
    if not episodes:
        raise ModelError("empty dataset")
    loss_cfg = loss_cfg or LossConfig()
    config, loss_cfg = apply_ablation(config, loss_cfg, ablation)

    model = DrivingModel(config)
    model.init_params(seed)

    rng = np.random.default_rng(seed + 1)
    order = rng.permutation(len(episodes))
    n_val = max(1, int(len(episodes) * val_fraction)) if len(episodes) > 1 else 0
    val_idx = order[:n_val]
    train_idx = order[n_val:] if n_val else order

    data = episodes_to_arrays(episodes)
    labels = {"pos": data["pos"], "vel": data["vel"], "acc": data["acc"]}
    val_data = {k: v[val_idx] for k, v in data.items()} if n_val else None

    log: list[dict] = []
    best_val = np.inf
    best_epoch = -1
    for epoch in range(max_epochs):
        perm = rng.permutation(train_idx)
        epoch_loss, n_batches = 0.0, 0
        for lo in range(0, len(perm), batch_size):
            idx = perm[lo:lo + batch_size]
            batch_labels = {k: labels[k][idx] for k in labels}
            loss = model.loss_batch(data["windows"][idx], data["v0"][idx],
                                    batch_labels, loss_cfg, with_grads=True)
            net.adam_step(model.store, lr=lr)
            epoch_loss += loss
            n_batches += 1
        train_loss = epoch_loss / max(n_batches, 1)

        if val_data is not None:
            val_labels = {k: val_data[k] for k in ("pos", "vel", "acc")}
            val_loss = model.loss_batch(val_data["windows"], val_data["v0"],
                                        val_labels, loss_cfg, with_grads=False)
            val_ade = evaluate_ade(model, val_data)
        else:
            val_loss, val_ade = train_loss, float("nan")
        row = {"epoch": epoch, "train_loss": train_loss,
               "val_loss": val_loss, "val_ade": val_ade}
        log.append(row)
        if progress:
            progress(row)
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_epoch = epoch
        elif epoch - best_epoch >= patience:
            break

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss",
                                                    "val_loss", "val_ade"])
            writer.writeheader()
            writer.writerows(log)
    return TrainResult(model=model, log=log, best_val_loss=float(best_val))
