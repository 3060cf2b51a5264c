"""Result aggregation and figure rendering.

The result table is the source of truth; everything here is derived from
it. Aggregation collapses seed replicates into mean plus min/max range,
and the renderer draws one learning-curve figure per (preset, domain)
with a line per model variant. Output order is fully deterministic so
reports diff cleanly across runs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ValidationError  # noqa: E402
from .manifest import FT_VARIANTS  # noqa: E402
from .tasks import DOMAINS  # noqa: E402

SUMMARY_HEADER = "preset,variant,domain,size,mean,min,max,seeds"

# fixed variant order keeps legends and CSV rows stable across runs
_VARIANT_ORDER = {v: i for i, v in enumerate(FT_VARIANTS)}


def aggregate(rows: list[dict]) -> list[dict]:
    """Collapse seed replicates: one row per (preset, variant, domain, size)."""
    if not rows:
        raise ValidationError("no result rows to aggregate")
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r["preset"], r["variant"], r["domain"], r["size"]), []).append(
            r["accuracy"])
    out = []
    for (preset, variant, domain, size) in sorted(
            groups, key=lambda k: (k[0], _VARIANT_ORDER.get(k[1], 99), k[2], k[3])):
        accs = groups[(preset, variant, domain, size)]
        out.append({
            "preset": preset, "variant": variant, "domain": domain, "size": size,
            "mean": sum(accs) / len(accs), "min": min(accs), "max": max(accs),
            "seeds": len(accs),
        })
    return out


def write_summary(path: str | Path, aggregated: list[dict]) -> None:
    lines = [SUMMARY_HEADER]
    for a in aggregated:
        lines.append(f"{a['preset']},{a['variant']},{a['domain']},{a['size']},"
                     f"{a['mean']:.9g},{a['min']:.9g},{a['max']:.9g},{a['seeds']}")
    Path(path).write_text("\n".join(lines) + "\n")


def render_curves(out_dir: str | Path, aggregated: list[dict]) -> list[Path]:
    """One SVG per (preset, domain): accuracy vs fine-tune size per variant."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells: dict[tuple[str, str], list[dict]] = {}
    for a in aggregated:
        cells.setdefault((a["preset"], a["domain"]), []).append(a)

    written = []
    for (preset, domain) in sorted(cells, key=lambda k: (k[0], DOMAINS.index(k[1]))):
        entries = cells[(preset, domain)]
        fig, ax = plt.subplots(figsize=(5, 3.4))
        variants = sorted({e["variant"] for e in entries},
                          key=lambda v: _VARIANT_ORDER.get(v, 99))
        for variant in variants:
            pts = sorted((e for e in entries if e["variant"] == variant),
                         key=lambda e: e["size"])
            xs = [e["size"] for e in pts]
            ax.plot(xs, [e["mean"] for e in pts], marker="o", label=variant)
            ax.fill_between(xs, [e["min"] for e in pts], [e["max"] for e in pts], alpha=0.15)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("fine-tune examples")
        ax.set_ylabel("test accuracy")
        ax.set_ylim(0.0, 1.05)
        ax.axhline(0.5, color="gray", lw=0.6, ls=":")
        ax.set_title(f"{preset} / test on {domain}")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"curve-{preset}-{domain}.svg"
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written


def run_report(results_path: str | Path, report_dir: str | Path) -> dict:
    """Aggregate a result table into summary.csv plus curve SVGs."""
    from .pipeline import read_results

    rows = read_results(Path(results_path))
    if not rows:
        raise ValidationError(f"result table {results_path} is empty or missing")
    aggregated = aggregate(rows)
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    write_summary(report_dir / "summary.csv", aggregated)
    figures = render_curves(report_dir, aggregated)
    return {"summary": report_dir / "summary.csv", "figures": figures,
            "rows": len(rows), "aggregates": len(aggregated)}
