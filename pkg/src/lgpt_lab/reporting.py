"""Deterministic table rendering for run and ablation reports."""

from __future__ import annotations

import io


class ReportError(ValueError):
    pass


def _baseline_index(arms: list[dict]) -> int:
    for i, arm in enumerate(arms):
        cfg = arm["config"]
        if cfg["readout"] == "mean" and cfg["fusion"] == "none":
            return i
    return 0


def _rows(arms: list[dict]) -> list[dict]:
    tasks = {arm["config"]["task"] for arm in arms}
    if len(tasks) != 1:
        raise ReportError(f"reports mix tasks: {sorted(tasks)}")
    base = arms[_baseline_index(arms)]
    base_mean = base["mean"]
    rows = []
    for arm in arms:
        if base_mean and base_mean == base_mean:  # nonzero and not NaN
            delta = f"{(arm['mean'] - base_mean) / base_mean * 100:+.2f}%"
        else:
            delta = "+0.00%" if arm is base else "n/a"
        rows.append({
            "arm": arm["label"],
            "readout": arm["config"]["readout"],
            "fusion": arm["config"]["fusion"],
            "n_tokens": str(arm["config"]["n_tokens"]),
            "mean": f"{arm['mean']:.4f}",
            "std": f"{arm['std']:.4f}",
            "delta_vs_baseline": delta,
            "error": arm.get("error") or "",
        })
    return rows


_COLUMNS = ["arm", "readout", "fusion", "n_tokens", "mean", "std",
            "delta_vs_baseline", "error"]


def render_table(arms: list[dict], fmt: str = "md") -> str:
    """Render ablation arms as markdown or CSV; byte-identical across calls."""
    rows = _rows(arms)
    if fmt == "csv":
        out = io.StringIO()
        out.write(",".join(_COLUMNS) + "\n")
        for row in rows:
            out.write(",".join(row[c] for c in _COLUMNS) + "\n")
        return out.getvalue()
    if fmt == "md":
        lines = ["| " + " | ".join(_COLUMNS) + " |",
                 "|" + "|".join("---" for _ in _COLUMNS) + "|"]
        for row in rows:
            lines.append("| " + " | ".join(row[c] for c in _COLUMNS) + " |")
        return "\n".join(lines) + "\n"
    raise ReportError(f"unknown format {fmt!r}")


def run_report_as_arm(report: dict) -> dict:
    """Wrap a single run report as a one-row ablation arm."""
    cfg = report["config"]
    return {"label": f"{cfg['readout']}/{cfg['fusion']}/n={cfg['n_tokens']}",
            "config": cfg,
            "metrics": [report["final_test_metric"]],
            "mean": report["final_test_metric"],
            "std": 0.0,
            "error": None}
