"""Shared model plumbing: parameter init, MLP graphs, and scene batching.

Both predictor families stack all agents of a batch of same-size scenes into
(B*N, features) matrices. Social pooling and per-scene reductions become
matmuls with block-structured constant matrices, so a whole batch runs as one
graph. History/future positions use a coordinate-major flat layout
[x_1..x_S | y_1..y_S] per agent row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


def glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))


def linear(pt: dict, name: str, x: ad.Tensor) -> ad.Tensor:
    return ad.addrow(ad.matmul(x, pt[f"{name}_w"]), pt[f"{name}_b"])


def mlp2(pt: dict, prefix: str, x: ad.Tensor) -> ad.Tensor:
    """Two-layer MLP: tanh hidden, linear output."""
    return linear(pt, f"{prefix}2", ad.tanh(linear(pt, f"{prefix}1", x)))


def param_tensors(params: dict) -> dict:
    """Differentiable leaf per parameter array."""
    return {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}


def const_tensors(params: dict) -> dict:
    return {k: ad.Tensor(v) for k, v in params.items()}


def flatten_track(track: np.ndarray) -> np.ndarray:
    """(N, S, 2) positions -> (N, 2S) coordinate-major rows."""
    return np.concatenate([track[:, :, 0], track[:, :, 1]], axis=1)


def unflatten_track(flat: np.ndarray) -> np.ndarray:
    """(N, 2S) coordinate-major rows -> (N, S, 2)."""
    n, two_s = flat.shape
    s = two_s // 2
    return np.stack([flat[:, :s], flat[:, s:]], axis=2)


@dataclass
class Batch:
    """Constants for a batch of B same-shape scenes stacked to B*N rows."""

    scenes: list
    n_scenes: int
    n_agents: int          # per scene
    history_len: int
    future_len: int
    dt: float
    hist: np.ndarray       # (B*N, 2H) flat history positions
    fut: np.ndarray        # (B*N, 2T) flat future positions
    pool: np.ndarray       # (B*N, B*N) neighbor-mean matrix, block diagonal
    group: np.ndarray      # (B, B*N) per-scene sum matrix
    cumsum: np.ndarray     # (T, T) upper-triangular ones
    fut_dx_rest: np.ndarray  # (B*N, T-1) future x displacements after the first
    fut_dy_rest: np.ndarray

    @property
    def rows(self) -> int:
        return self.n_scenes * self.n_agents


def stack_scenes(scenes) -> Batch:
    """Stack same-shape scenes; raises if N, H, T, or dt differ."""
    if not scenes:
        raise ad.ShapeError("stack_scenes: empty batch")
    n = scenes[0].n_agents
    h = scenes[0].history_len
    t = scenes[0].future_len
    dt = scenes[0].dt
    for s in scenes:
        if (s.n_agents, s.history_len, s.future_len) != (n, h, t) or s.dt != dt:
            raise ad.ShapeError("stack_scenes: scenes disagree on N/H/T/dt")
    b = len(scenes)
    hist = np.concatenate([flatten_track(s.history) for s in scenes], axis=0)
    fut = np.concatenate([flatten_track(s.future) for s in scenes], axis=0)

    pool = np.zeros((b * n, b * n))
    if n > 1:
        block = (np.ones((n, n)) - np.eye(n)) / (n - 1)
        for i in range(b):
            pool[i * n:(i + 1) * n, i * n:(i + 1) * n] = block
    group = np.zeros((b, b * n))
    for i in range(b):
        group[i, i * n:(i + 1) * n] = 1.0

    fut_x, fut_y = fut[:, :t], fut[:, t:]
    return Batch(scenes=list(scenes), n_scenes=b, n_agents=n, history_len=h,
                 future_len=t, dt=dt, hist=hist, fut=fut, pool=pool, group=group,
                 cumsum=np.triu(np.ones((t, t))),
                 fut_dx_rest=np.diff(fut_x, axis=1), fut_dy_rest=np.diff(fut_y, axis=1))


def history_features(hist_t: ad.Tensor, h: int) -> ad.Tensor:
    """Displacement-step features (B*N, 2(H-1)) from flat history positions.

    Translation-invariant by construction, which is what makes decoded
    trajectories translation-equivariant.
    """
    hx = ad.slice_axis(hist_t, 1, 0, h)
    hy = ad.slice_axis(hist_t, 1, h, 2 * h)
    dx = ad.sub(ad.slice_axis(hx, 1, 1, h), ad.slice_axis(hx, 1, 0, h - 1))
    dy = ad.sub(ad.slice_axis(hy, 1, 1, h), ad.slice_axis(hy, 1, 0, h - 1))
    return ad.concat([dx, dy], axis=1)


def last_position(hist_t: ad.Tensor, h: int) -> tuple:
    """Last observed (x, y) as two (B*N, 1) tensors."""
    return (ad.slice_axis(hist_t, 1, h - 1, h),
            ad.slice_axis(hist_t, 1, 2 * h - 1, 2 * h))


def future_disp_features(hist_t: ad.Tensor, batch: Batch) -> ad.Tensor:
    """Future displacement steps (B*N, 2T); first step is relative to the
    (possibly perturbed) last observed position, the rest are constants."""
    t = batch.future_len
    last_x, last_y = last_position(hist_t, batch.history_len)
    first_dx = ad.sub(ad.Tensor(batch.fut[:, :1]), last_x)
    first_dy = ad.sub(ad.Tensor(batch.fut[:, t:t + 1]), last_y)
    return ad.concat([first_dx, ad.Tensor(batch.fut_dx_rest),
                      first_dy, ad.Tensor(batch.fut_dy_rest)], axis=1)


def positions_from_disp(disp_t: ad.Tensor, hist_t: ad.Tensor, batch: Batch) -> ad.Tensor:
    """Cumulative-sum displacement steps into absolute positions (B*N, 2T)."""
    t = batch.future_len
    rows = batch.rows
    cum = ad.Tensor(batch.cumsum)
    last_x, last_y = last_position(hist_t, batch.history_len)
    abs_x = ad.addcol(ad.matmul(ad.slice_axis(disp_t, 1, 0, t), cum),
                      ad.reshape(last_x, (rows,)))
    abs_y = ad.addcol(ad.matmul(ad.slice_axis(disp_t, 1, t, 2 * t), cum),
                      ad.reshape(last_y, (rows,)))
    return ad.concat([abs_x, abs_y], axis=1)


def relative_track(traj_t: ad.Tensor, hist_t: ad.Tensor, batch: Batch) -> ad.Tensor:
    """Positions re-anchored to the last observed point, (B*N, 2T).

    Subtracting each agent's current position removes the rigid shift a
    history perturbation injects, leaving only the path-shape change.
    """
    t = batch.future_len
    last_x, last_y = last_position(hist_t, batch.history_len)
    rx = ad.addcol(ad.slice_axis(traj_t, 1, 0, t),
                   ad.reshape(ad.scale(last_x, -1.0), (batch.rows,)))
    ry = ad.addcol(ad.slice_axis(traj_t, 1, t, 2 * t),
                   ad.reshape(ad.scale(last_y, -1.0), (batch.rows,)))
    return ad.concat([rx, ry], axis=1)


def scene_sums(per_row: ad.Tensor, batch: Batch) -> ad.Tensor:
    """(B*N,) row values -> (B,) per-scene sums."""
    col = ad.reshape(per_row, (batch.rows, 1))
    return ad.reshape(ad.matmul(ad.Tensor(batch.group), col), (batch.n_scenes,))


def row_sqerr(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """Per-row sum of squared differences, (rows,)."""
    d = ad.sub(a, b)
    return ad.sum_over_axis(ad.mul(d, d), 1)
