"""Full-batch Adam training with validation-based early stopping."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .operators import HardConstraintWrapper, OperatorError


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 10000
    patience: int = 1000
    seed: int = 0
    validation_fraction: float = 0.1
    batch: str = "full"
    init_bias_to_target_mean: bool = True

    def validate(self):
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if not 0 < self.patience < self.max_epochs:
            raise TrainingError("patience must satisfy 0 < patience < max_epochs")
        if self.batch != "full":
            raise TrainingError(f"unsupported batch policy {self.batch!r}")
        return self


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value()) for p in self.params]
        self.v = [np.zeros_like(p.value()) for p in self.params]

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = np.asarray(g)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**self.t)
            v_hat = self.v[i] / (1 - b2**self.t)
            p.data = p.value() - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _subset(branch_inputs, idx):
    return [np.asarray(v)[idx] for v in branch_inputs]


def _make_predictor(model, branch_inputs, grid):
    """Closure evaluating model predictions on a fixed sample subset.

    For hard-constraint wrappers the boundary interpolant and the frozen
    auxiliary interior values do not depend on trainable weights, so they
    are precomputed once as constants.
    """
    if isinstance(model, HardConstraintWrapper):
        W, _ = model.interp_matrices(grid)
        a_row = model.alpha(grid)[None, :]
        interior = model.interior_values(branch_inputs).value()
        nodal = np.concatenate([np.asarray(branch_inputs[0], dtype=float), interior], axis=1)
        pg = T.Tensor(nodal @ W.T)
        a_const = T.Tensor(a_row)

        def predict():
            return T.add(T.mul(model.inner.forward(branch_inputs, grid), a_const), pg)

        return predict

    def predict():
        return model.forward(branch_inputs, grid)

    return predict


def train(model, dataset, cfg):
    """Minimize full-batch MSE; returns (model, history).

    ``dataset`` exposes ``branch_inputs`` (list of (N, ...) arrays),
    ``grid`` ((P, d) output coordinates) and ``outputs`` ((N, P) values).
    Training stops at ``max_epochs`` or once the best validation loss has
    not improved for ``patience`` epochs; the best-validation weights are
    restored before returning.  ``history`` lists per-epoch losses.
    """
    cfg.validate()
    branch_inputs = [np.asarray(v, dtype=float) for v in dataset.branch_inputs]
    outputs = np.asarray(dataset.outputs, dtype=float)
    grid = np.atleast_2d(np.asarray(dataset.grid, dtype=float))
    n = outputs.shape[0]
    if n == 0:
        raise OperatorError("empty dataset")

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_val = int(round(cfg.validation_fraction * n)) if n > 1 else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    train_in = _subset(branch_inputs, train_idx)
    val_in = _subset(branch_inputs, val_idx)
    y_train = outputs[train_idx]
    y_val = outputs[val_idx]

    base = model.inner if isinstance(model, HardConstraintWrapper) else model
    base.set_normalization(
        [v.mean(axis=0) for v in train_in], [v.std(axis=0) for v in train_in]
    )
    if not isinstance(model, HardConstraintWrapper) and cfg.init_bias_to_target_mean:
        model.b0 = T.Tensor(np.full((1, 1), y_train.mean()), requires_grad=True)

    predict_train = _make_predictor(model, train_in, grid)
    predict_val = _make_predictor(model, val_in, grid) if n_val else None
    y_train_t = T.Tensor(y_train)

    params = model.parameters()
    adam = Adam(params, lr=cfg.learning_rate)
    history = []
    best_val = np.inf
    best_weights = model.get_weights()
    since_best = 0
    last_finite = None

    for epoch in range(1, cfg.max_epochs + 1):
        try:
            with T.Tape() as tape:
                d = T.sub(predict_train(), y_train_t)
                loss = T.mean(T.mul(d, d))
                train_loss = float(loss.value())
                grads = tape.gradients(loss, params)
        except T.NonFiniteError as exc:
            raise TrainingError(
                f"non-finite loss at epoch {epoch}; last finite loss {last_finite}"
            ) from exc
        if not np.isfinite(train_loss):
            raise TrainingError(
                f"non-finite loss at epoch {epoch}; last finite loss {last_finite}"
            )
        last_finite = train_loss
        adam.step(grads)

        if n_val:
            dv = predict_val().value() - y_val
            val_loss = float(np.mean(dv * dv))
        else:
            val_loss = train_loss
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})

        if val_loss < best_val:
            best_val = val_loss
            best_weights = model.get_weights()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    model.set_weights(best_weights)
    snapshot = {"config": asdict(cfg), "epochs_run": len(history), "best_val_loss": best_val}
    if isinstance(model, HardConstraintWrapper):
        model.inner.training_snapshot = snapshot
    else:
        model.training_snapshot = snapshot
    return model, history


def history_to_text(history):
    lines = ["epoch\ttrain_loss\tval_loss"]
    for row in history:
        lines.append(f"{row['epoch']}\t{row['train_loss']:.10e}\t{row['val_loss']:.10e}")
    return "\n".join(lines) + "\n"
