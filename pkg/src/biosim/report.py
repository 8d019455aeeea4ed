"""Analysis reports (JSON + text table) and SVG plots."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import curve_from_dict

REPORT_VERSION = 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        # JSON has no inf/nan; keep them readable and loss-free
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


@dataclass
class AnalysisReport:
    command: str
    argv: list
    config: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    status: str = "ok"
    error: str | None = None

    def to_dict(self) -> dict:
        return _jsonable({
            "report_version": REPORT_VERSION,
            "command": self.command,
            "argv": list(self.argv),
            "status": self.status,
            "error": self.error,
            "config": self.config,
            "results": self.results,
            "warnings": list(self.warnings),
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    def scalar_rows(self) -> list[tuple[str, object]]:
        """Flattened ``(dotted.key, value)`` pairs for every scalar; lists are skipped."""
        rows = []

        def walk(prefix, node):
            if isinstance(node, dict):
                for k, v in node.items():
                    walk(f"{prefix}.{k}" if prefix else str(k), v)
            elif not isinstance(node, list):
                rows.append((prefix, node))

        d = self.to_dict()
        walk("", {k: d[k] for k in ("command", "status", "error", "config", "results")})
        return rows

    def render_text(self) -> str:
        rows = self.scalar_rows()
        width = max((len(k) for k, _ in rows), default=0)
        lines = [f"{k.ljust(width)}  {_fmt(v)}" for k, v in rows]
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


# ---------------------------------------------------------------------------
# plots
# ---------------------------------------------------------------------------


def _collect_curves(node, path=""):
    """Every ``{"curve": {...}}`` entry in the results tree, keyed by its path."""
    found = {}
    if isinstance(node, dict):
        if isinstance(node.get("curve"), dict) and "kind" in node["curve"]:
            found[path or "curve"] = node["curve"]
        for k, v in node.items():
            if k != "curve":
                found.update(_collect_curves(v, f"{path}.{k}" if path else k))
    return found


def _collect_replicates(node, path=""):
    found = {}
    if isinstance(node, dict):
        if isinstance(node.get("replicate_values"), list) and node["replicate_values"]:
            found[path or "bootstrap"] = node
        for k, v in node.items():
            found.update(_collect_replicates(v, f"{path}.{k}" if path else k))
    return found


def emit_plots(report, out_dir) -> list[Path]:
    """Write an overlay of fitted curves and one histogram per bootstrap sample.

    ``report`` may be an :class:`AnalysisReport` or its ``to_dict()`` form.
    Returns the written paths; an empty list (with a warning) when there is
    nothing to draw.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    d = report.to_dict() if isinstance(report, AnalysisReport) else report
    results = d.get("results", {}) or {}
    curves = _collect_curves(results)
    samples = _collect_replicates(results)
    if not curves and not samples:
        warnings.warn("report has no fitted curves or bootstrap replicates; no plots written",
                      RuntimeWarning, stacklevel=2)
        return []

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    spec = results.get("metric", {}).get("spec") if isinstance(results.get("metric"), dict) else None

    if curves:
        rebuilt = {name: curve_from_dict(c) for name, c in curves.items()}
        t_hi = max(
            [c.get("t_max") or 0.0 for c in curves.values()]
            + [float(spec["b"]) if spec else 0.0]
            + [max(results.get("times", [0.0]) or [0.0])]
        )
        t_hi = t_hi if t_hi > 0 else 30.0
        grid = np.linspace(0.0, 1.05 * t_hi, 400)
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, c in rebuilt.items():
            ax.plot(grid, np.asarray(c(grid)), label=name)
        for name, obs in (results.get("observed") or {}).items():
            ax.plot(obs["time"], np.asarray(obs["responders"]) / obs["n"], "o", ms=3,
                    label=f"{name} observed")
        if spec:
            for x in (spec["a"], spec["b"]):
                ax.axvline(float(x), color="grey", ls="--", lw=0.8)
        ax.set_xlabel("time")
        ax.set_ylabel("response rate")
        ax.set_ylim(0, 1)
        ax.legend(fontsize=7)
        path = out_dir / f"{d.get('command', 'report')}_curves.svg"
        fig.savefig(path, format="svg")
        plt.close(fig)
        written.append(path)

    for name, node in samples.items():
        vals = np.asarray(node["replicate_values"], dtype=float)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.hist(vals, bins=min(50, max(10, vals.size // 20)), color="#9ab", edgecolor="white")
        for q in np.quantile(vals, [0.025, 0.5, 0.975], method="hazen"):
            ax.axvline(q, color="k", ls="--", lw=0.9)
        ax.set_xlabel("metric")
        ax.set_ylabel("count")
        path = out_dir / f"{d.get('command', 'report')}_{name.replace('.', '_')}_hist.svg"
        fig.savefig(path, format="svg")
        plt.close(fig)
        written.append(path)
    return written
