"""Report rendering: detection-rate tables, common-feature counts, CI histograms."""

import csv
import io
import os

import numpy as np

from . import causal, detectors

NM_SETTINGS = ((3, 10), (5, 20), (10, 30))


def _atomic_write(path, text):
    tmp = str(path) + ".tmp"
    mode = "w" if isinstance(text, str) else "wb"
    with open(tmp, mode) as fh:
        fh.write(text)
    os.replace(tmp, path)


def report_csv(report):
    """EvalReport as CSV text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["strategy", "tpr", "fpr", "clean_flagged", "adv_flagged",
                     "clean_mean_evidence", "adv_mean_evidence"])
    for name in detectors.STRATEGY_NAMES:
        if name not in report.strategies:
            continue
        r = report.strategies[name]
        writer.writerow([name, f"{r.tpr:.6f}", f"{r.fpr:.6f}", r.clean_flagged, r.adv_flagged,
                         "" if r.clean_mean is None else f"{r.clean_mean:.6f}",
                         "" if r.adv_mean is None else f"{r.adv_mean:.6f}"])
    return buf.getvalue()


def report_text(populations):
    """Aligned-text table over {population_name: EvalReport-like rows}.

    populations: list of (name, EvalReport). The clean population in each
    report is shared; rows show per-attack flagged counts per strategy.
    """
    lines = []
    header = f"{'population':<24}" + "".join(f"{s:>18}" for s in detectors.STRATEGY_NAMES)
    lines.append(header)
    lines.append("-" * len(header))
    first = True
    for name, report in populations:
        row = f"{name:<24}"
        clean_row = f"{'clean':<24}"
        for s in detectors.STRATEGY_NAMES:
            r = report.strategies.get(s)
            row += f"{(r.adv_flagged if r else '-'):>18}"
            clean_row += f"{(r.clean_flagged if r else '-'):>18}"
        if first:
            lines.append(clean_row + "   (flagged adversarial)")
            first = False
        lines.append(row)
    return "\n".join(lines) + "\n"


def common_feature_counts(clean_cis, adv_cis_by_name, registry, tau_zero, k=1):
    """Intersection pass counts (clean vs each attack) at the reference n/m settings."""
    rows = []
    for n, m in NM_SETTINGS:
        cfg = detectors.DetectorConfig(strategy4_n=n, strategy4_m=m, strategy4_k=k,
                                       tau_zero=tau_zero)
        def passes(cis):
            count = 0
            for ci in cis:
                v = detectors.strategy4(ci, registry, cfg)
                if v.decision == detectors.CLEAN:
                    count += 1
            return count
        row = {"n": n, "m": m, "clean": passes(clean_cis), "clean_total": len(clean_cis)}
        for name, cis in sorted(adv_cis_by_name.items()):
            row[name] = passes(cis)
            row[name + "_total"] = len(cis)
        rows.append(row)
    return rows


def common_features_csv(rows):
    buf = io.StringIO()
    keys = list(rows[0].keys())
    writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def ci_histogram_csv(cis_by_name, bins=40, lo=-0.5, hi=1.0):
    """Binned CI value counts per population, for external plotting."""
    edges = np.linspace(lo, hi, bins + 1)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["population", "bin_left", "bin_right", "count"])
    for name, cis in sorted(cis_by_name.items()):
        values = np.concatenate([np.asarray(ci.values) for ci in cis]) if cis else np.zeros(0)
        counts, _ = np.histogram(values, bins=edges)
        for i, c in enumerate(counts):
            writer.writerow([name, f"{edges[i]:.6f}", f"{edges[i + 1]:.6f}", int(c)])
    return buf.getvalue()


def write_reports(out_dir, populations, clean_cis, adv_cis_by_name, registry, tau_zero):
    """Emit report.csv / report.txt / common_features.csv / ci_histogram.csv."""
    os.makedirs(out_dir, exist_ok=True)
    csv_parts = []
    for name, report in populations:
        csv_parts.append(f"# population: {name}\n" + report_csv(report))
    _atomic_write(os.path.join(out_dir, "report.csv"), "\n".join(csv_parts))
    _atomic_write(os.path.join(out_dir, "report.txt"), report_text(populations))
    rows = common_feature_counts(clean_cis, adv_cis_by_name, registry, tau_zero)
    _atomic_write(os.path.join(out_dir, "common_features.csv"), common_features_csv(rows))
    hists = {"clean": clean_cis}
    hists.update(adv_cis_by_name)
    _atomic_write(os.path.join(out_dir, "ci_histogram.csv"), ci_histogram_csv(hists))
