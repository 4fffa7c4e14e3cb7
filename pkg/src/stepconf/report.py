"""Report bundle: probe grids, conformal audit, steering summary, density comparison.

All numbers are formatted with fixed precision and no timestamps, so two runs
from the same config produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import math
from typing import TYPE_CHECKING, Sequence

from stepconf.trajectory import Split

if TYPE_CHECKING:
    from stepconf.pipeline import Pipeline

GRID_SPLITS = (Split.TEST_ID, Split.TEST_OOD)


def _fmt(v: float | None, digits: int = 3) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return f"{v:.{digits}f}"


def csv_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def text_table(header: Sequence[str], rows: Sequence[Sequence[str]], title: str = "") -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).rjust(w) for c, w in zip(cells, widths)).rstrip()
    out = [title] if title else []
    out.append(line(header))
    out.append("  ".join("-" * w for w in widths))
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


def grid_rows(cells: dict, layers: Sequence[int], timesteps: Sequence[int], metric: str) -> list[list[str]]:
    """Layers as rows, timesteps as columns; missing cells render as '-'."""
    rows = []
    for layer in layers:
        row = [f"L{layer}"]
        for t in timesteps:
            m = cells.get(f"{layer}:{t}", {})
            row.append(_fmt(m.get(metric)))
        rows.append(row)
    return rows


def mean_metric(cells: dict, metric: str) -> float:
    vals = [m[metric] for m in cells.values() if metric in m]
    return sum(vals) / len(vals) if vals else float("nan")


def audit_rows(audit: dict) -> list[list[str]]:
    rows = []
    for t, a in sorted(audit["per_timestep"].items(), key=lambda kv: int(kv[0])):
        rows.append([t, str(a["n"]), _fmt(a["fnr"]), _fmt(audit["eps_s"]), _fmt(a["fpr"]), _fmt(audit["eps_f"]),
                     _fmt(a["abstain_rate"])])
    p = audit["pooled"]
    rows.append(["all", str(p["n"]), _fmt(p["fnr"]), _fmt(audit["eps_s"]), _fmt(p["fpr"]), _fmt(audit["eps_f"]),
                 _fmt(p["abstain_rate"])])
    return rows


AUDIT_HEADER = ["t", "n", "fnr", "bound_s", "fpr", "bound_f", "abstain"]


def steering_rows(doc: dict) -> list[list[str]]:
    spec = doc["spec"]
    rows = [
        ["layer", str(spec["layer"])],
        ["layer_choice", doc["layer_choice"]],
        ["timesteps", " ".join(str(t) for t in spec["timesteps"])],
        ["coefficient", f"{spec['coefficient']:g}"],
        ["n_success_examples", str(doc["vector"]["n_success"])],
        ["n_failure_examples", str(doc["vector"]["n_failure"])],
    ]
    if "cosine_to_ground_truth" in doc:
        rows.append(["cosine_to_ground_truth", _fmt(doc["cosine_to_ground_truth"])])
    cl = doc.get("closed_loop")
    if cl:
        rows += [
            ["episodes", str(cl["n_episodes"])],
            ["baseline_success", _fmt(cl["baseline_success"])],
            ["steered_success", _fmt(cl["steered_success"])],
            ["lift", _fmt(cl["lift"])],
            ["ci95_low", _fmt(cl["ci95"][0])],
            ["ci95_high", _fmt(cl["ci95"][1])],
        ]
    else:
        rows.append(["closed_loop", "not run (ingested dataset)"])
    return rows


def build_report(pipe: Pipeline) -> dict[str, str]:
    files: dict[str, str] = {}
    headline = pipe.cfg.test_labels
    density = []
    for kind in pipe.kinds:
        metrics = json.loads(pipe.metrics_path(kind).read_text(encoding="utf-8"))
        layers, timesteps = metrics["layers"], metrics["timesteps"]
        header = ["layer"] + [f"t={t}" for t in timesteps]
        for split in GRID_SPLITS:
            section = metrics["test"][f"{split.value}/{headline}"]
            for metric in ("accuracy", "f1"):
                rows = grid_rows(section["cells"], layers, timesteps, metric)
                stem = f"{metric}-{kind.value}-{split.value}"
                title = (f"{metric} of linear probes, {kind.value} env, {split.value} split, "
                         f"{headline} labels; mean {_fmt(mean_metric(section['cells'], metric))}")
                if split is Split.TEST_OOD:
                    title += " (OOD stand-in: unseen seeds, shifted object vocabulary)"
                files[f"{stem}.csv"] = csv_table(header, rows)
                files[f"{stem}.txt"] = text_table(header, rows, title)
        section = metrics["test"][f"{Split.TEST_ID.value}/{headline}"]
        density.append([kind.value, _fmt(mean_metric(section["cells"], "accuracy")),
                        _fmt(mean_metric(section["cells"], "f1"))])

        audit = json.loads(pipe.audit_path(kind).read_text(encoding="utf-8"))
        rows = audit_rows(audit)
        files[f"audit-{kind.value}.csv"] = csv_table(AUDIT_HEADER, rows)
        files[f"audit-{kind.value}.txt"] = text_table(
            AUDIT_HEADER, rows, f"conformal audit, {kind.value} env, test-id split, truth = {audit['truth']}")

    doc = json.loads(pipe.steering_path.read_text(encoding="utf-8"))
    rows = steering_rows(doc)
    files["steering.csv"] = csv_table(["field", "value"], rows)
    files["steering.txt"] = text_table(["field", "value"], rows, "steering summary")

    if len(density) > 1:
        header = ["env", "mean_accuracy", "mean_f1"]
        files["density.csv"] = csv_table(header, density)
        files["density.txt"] = text_table(header, density, f"dense vs sparse probe comparison, {headline} labels")
    return files
