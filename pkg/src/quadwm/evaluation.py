"""RMSE tables for in-distribution rollouts and error-over-time for the OOD flight."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .replay import Batch, NoEligibleEpisode, ReplayBuffer, make_batch, merge_contiguous, window
from .types import GROUPS, GROUP_SLICES, Episode, Tag, state_delta
from .worldmodel import RolloutTruncated

HEADINGS = {
    "position": ("Position (Earth) (m)", ("N", "E", "D")),
    "velocity": ("Velocity (Body) (m/s)", ("F", "R", "D")),
    "attitude": ("Attitude (rad)", ("x", "y", "z")),
    "rates": ("Angular Velocity (rad/s)", ("x", "y", "z")),
}
STATE_LABELS = ("N", "E", "D", "u", "v", "w", "roll", "pitch", "yaw", "p", "q", "r")
DIVERGENCE_EPS = 1e-6


@dataclass
class RmseReport:
    per_axis: dict[str, np.ndarray]
    horizon: int
    model: str = ""
    dataset: str = ""
    n_rollouts: int = 1
    truncated: int = 0

    def overall(self, group: str) -> float:
        return float(np.sqrt(np.mean(self.per_axis[group] ** 2)))

    def overalls(self) -> dict[str, float]:
        return {g: self.overall(g) for g in GROUPS}

    @classmethod
    def from_mse(cls, mse: np.ndarray, **kw) -> "RmseReport":
        rmse = np.sqrt(np.asarray(mse, dtype=float))
        return cls({g: rmse[GROUP_SLICES[g]].copy() for g in GROUPS}, **kw)


@dataclass
class ErrorSeries:
    times: np.ndarray  # (T,)
    errors: np.ndarray  # (T, 12) absolute, attitude wrapped
    truncated_at: int | None = None

    def __len__(self) -> int:
        return len(self.times)

    def group_error(self, group: str) -> np.ndarray:
        """Per-step root-mean-square of the group's three axes."""
        return np.sqrt(np.mean(self.errors[:, GROUP_SLICES[group]] ** 2, axis=1))

    def divergence(self, group: str) -> float:
        """Mean final-quarter error over mean first-quarter error."""
        e = self.group_error(group)
        q = max(1, len(e) // 4)
        return float(np.mean(e[-q:]) / (np.mean(e[:q]) + DIVERGENCE_EPS))

    def divergences(self) -> dict[str, float]:
        return {g: self.divergence(g) for g in GROUPS}


def rmse_report(pred, truth, model: str = "", dataset: str = "") -> RmseReport:
    """Per-axis RMSE pooled over all leading axes (rollouts and steps)."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.size == 0:
        raise ValueError("empty rollout")
    d = state_delta(pred, truth).reshape(-1, 12)
    horizon = pred.shape[-2] if pred.ndim >= 2 else 1
    n = int(np.prod(pred.shape[:-2])) if pred.ndim > 2 else 1
    return RmseReport.from_mse(np.mean(d * d, axis=0), horizon=horizon, model=model, dataset=dataset, n_rollouts=n)


def safe_rollout(model, batch: Batch) -> tuple[np.ndarray, list[int | None]]:
    """Batched rollout; items that leave the pitch guard hold their last
    valid prediction for the remaining steps."""
    try:
        return np.asarray(model.rollout(batch)), [None] * batch.size
    except RolloutTruncated:
        pass
    preds = np.zeros(batch.truth.shape)
    cuts: list[int | None] = []
    for b in range(batch.size):
        item = batch.item(b)
        try:
            preds[b] = np.asarray(model.rollout(item))[0]
            cuts.append(None)
        except RolloutTruncated as exc:
            k = exc.step
            part = np.asarray(exc.partial)[0] if len(exc.partial) else np.zeros((0, 12))
            preds[b, : len(part)] = part
            preds[b, len(part) :] = part[-1] if len(part) else item.x0[0]
            cuts.append(k)
    return preds, cuts


def id_windows(buffer: ReplayBuffer, rng: np.random.Generator, n: int, horizon: int, history: int) -> Batch:
    """Validation windows over the continuous flights stored in ``buffer``."""
    flights = ReplayBuffer(10**9, merge_contiguous(buffer.episodes))
    return flights.sample_sequences(rng, n, horizon, history)


def evaluate_id(
    model,
    buffer: ReplayBuffer,
    horizon: int = 128,
    n_rollouts: int = 20,
    rng: np.random.Generator | None = None,
    history: int = 8,
    dataset: str = "id",
    windows: Batch | None = None,
) -> RmseReport:
    if windows is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        windows = id_windows(buffer, rng, n_rollouts, horizon, history)
    preds, cuts = safe_rollout(model, windows)
    rep = rmse_report(preds, windows.truth, getattr(model, "kind", ""), dataset)
    rep.truncated = sum(c is not None for c in cuts)
    return rep


def ood_batch(ood: Episode, horizon: int, history: int = 8) -> Batch:
    if len(ood) < horizon:
        raise NoEligibleEpisode(f"OOD episode has {len(ood)} steps, horizon {horizon} requested")
    return make_batch([window(ood, 0, horizon, history)])


def evaluate_ood(model, ood: Episode, horizon: int = 128, history: int = 8) -> tuple[RmseReport, ErrorSeries]:
    if ood.tag != Tag.HOVER_TO_FORWARD:
        raise ValueError(f"OOD evaluation expects a HoverToForward episode, got {ood.tag.value}")
    batch = ood_batch(ood, horizon, history)
    preds, cuts = safe_rollout(model, batch)
    rep = rmse_report(preds, batch.truth, getattr(model, "kind", ""), f"ood{horizon}")
    rep.truncated = sum(c is not None for c in cuts)
    err = np.abs(state_delta(preds[0], batch.truth[0]))
    times = ood.dt * np.arange(1, horizon + 1)
    return rep, ErrorSeries(times, err, cuts[0])


# ---------------------------------------------------------------------------
# files


def report_csv(report: RmseReport) -> str:
    buf = io.StringIO()
    buf.write(f"# model={report.model} dataset={report.dataset} horizon={report.horizon} n_rollouts={report.n_rollouts}\n")
    w = csv.writer(buf, lineterminator="\n")
    for g in GROUPS:
        title, axes = HEADINGS[g]
        w.writerow([title, *axes, "Overall"])
        w.writerow(["RMSE", *[repr(float(v)) for v in report.per_axis[g]], repr(report.overall(g))])
    return buf.getvalue()


def parse_report_csv(text: str) -> RmseReport:
    meta = {}
    rows = []
    for line in text.splitlines():
        if line.startswith("#"):
            for kv in line[1:].split():
                k, _, v = kv.partition("=")
                meta[k] = v
        elif line.strip():
            rows.append(next(csv.reader([line])))
    per_axis = {}
    for g, (head, vals) in zip(GROUPS, zip(rows[0::2], rows[1::2])):
        if head[0] != HEADINGS[g][0]:
            raise ValueError(f"unexpected heading {head[0]!r}")
        per_axis[g] = np.array([float(v) for v in vals[1:4]])
    return RmseReport(per_axis, int(meta.get("horizon", 0)), meta.get("model", ""), meta.get("dataset", ""),
                      int(meta.get("n_rollouts", 1)))


def report_table(report: RmseReport, decimals: int = 3) -> str:
    lines = [f"RMSE  model={report.model}  dataset={report.dataset}  horizon={report.horizon}"]
    width = 26
    for g in GROUPS:
        title, axes = HEADINGS[g]
        lines.append("-" * (width + 4 * 10))
        lines.append(title.ljust(width) + "".join(a.rjust(10) for a in (*axes, "Overall")))
        vals = [*report.per_axis[g], report.overall(g)]
        lines.append("RMSE".ljust(width) + "".join(f"{v:10.{decimals}f}" for v in vals))
    lines.append("-" * (width + 4 * 10))
    return "\n".join(lines) + "\n"


def series_csv(series: ErrorSeries | None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "time", *[f"err_{s}" for s in STATE_LABELS]])
    if series is not None:
        for k in range(len(series)):
            w.writerow([k + 1, repr(float(series.times[k])), *[repr(float(v)) for v in series.errors[k]]])
    return buf.getvalue()


def parse_series_csv(text: str) -> ErrorSeries:
    rows = list(csv.reader(io.StringIO(text)))[1:]
    if not rows:
        return ErrorSeries(np.zeros(0), np.zeros((0, 12)))
    arr = np.array([[float(v) for v in r] for r in rows])
    return ErrorSeries(arr[:, 1], arr[:, 2:])


def emit_report(report: RmseReport, series: ErrorSeries | None, path: str | Path, series_name: str | None = None) -> list[Path]:
    """Write ``rmse_{dataset}_{model}.csv`` and ``table_...txt`` (plus the
    error series, when given) into directory ``path``."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    tag = f"{report.dataset}_{report.model}"
    out = [d / f"rmse_{tag}.csv", d / f"table_{tag}.txt"]
    out[0].write_text(report_csv(report))
    out[1].write_text(report_table(report))
    if series is not None or series_name is not None:
        name = series_name or f"series_ood_{report.model}.csv"
        p = d / name
        p.write_text(series_csv(series))
        out.append(p)
    return out
