import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from config import FLOAT_FORMAT, SCHEMA_VERSION, VERSION


@dataclass
class CheckReport:
    """Outcome of one report-only operation"""
    name: str
    passed: bool
    residual: float
    tolerance: Optional[float]
    details: Dict[str, Any] = field(default_factory=dict)

    def __bool__(self):
        return self.passed


def combine_reports(name, reports, **details):
    """Fold several reports into one; passes iff all pass, residual is the worst margin"""
    reports = list(reports)
    if not reports:
        return CheckReport(name, True, 0.0, 0.0, {"vacuous": True, **details})
    worst = max(reports, key=lambda r: _margin(r))
    return CheckReport(
        name,
        all(r.passed for r in reports),
        worst.residual,
        worst.tolerance,
        {"parts": [r.name for r in reports if not r.passed], "count": len(reports), **details},
    )


def _margin(report):
    if report.tolerance is None:
        return -math.inf
    return report.residual - report.tolerance


@dataclass
class CheckRecord:
    name: str
    instance: str
    residual: float
    tolerance: Optional[float]
    passed: bool
    note: str = ""

    def as_row(self):
        return {
            "name": self.name,
            "instance": self.instance,
            "residual": self.residual,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "note": self.note,
        }


@dataclass
class SuiteReport:
    suite: str
    records: List[CheckRecord]
    provenance: Dict[str, Any]
    extra_tables: Dict[str, pd.DataFrame] = field(default_factory=dict)

    @property
    def failures(self):
        return [r for r in self.records if not r.passed]

    @property
    def passed(self):
        return not self.failures

    def summary(self):
        """Counts and worst residual per check name"""
        worst = {}
        for record in self.records:
            if not _is_finite(record.residual):
                continue
            if record.name not in worst or record.residual > worst[record.name]:
                worst[record.name] = record.residual
        return {
            "total": len(self.records),
            "passed": len(self.records) - len(self.failures),
            "failed": len(self.failures),
            "worst_residuals": dict(sorted(worst.items())),
        }


def _is_finite(value):
    return value is not None and isinstance(value, (int, float)) and math.isfinite(value)


def config_hash(payload):
    """md5 of the canonical JSON form of a config payload"""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.md5(canonical.encode()).hexdigest()


def provenance(suite, seeds, payload):
    return {
        "suite": suite,
        "seeds": list(seeds),
        "config_hash": config_hash(payload),
        "version": VERSION,
        "schema_version": SCHEMA_VERSION,
    }


def to_plain(obj):
    """Convert numpy containers to JSON-friendly python and fix float formatting"""
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_plain(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if not math.isfinite(value):
            return str(value)
        return float(FLOAT_FORMAT % value)
    return obj


def dump_json(payload, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(to_plain(payload), f, sort_keys=True, indent=2)
        f.write("\n")
    return path


class ReportProcessor:
    """Collects check records and writes them out"""

    def __init__(self, suite, provenance_info):
        self.suite = suite
        self.provenance = provenance_info
        self.records = []
        self.tables = {}
        self.processing_stats = {
            'total_processed': 0,
            'passed': 0,
            'failed': 0,
            'errors': 0,
        }

    def add_report(self, instance, report, note=""):
        """Add a CheckReport produced for one instance"""
        record = CheckRecord(
            name=report.name,
            instance=instance,
            residual=float(report.residual),
            tolerance=None if report.tolerance is None else float(report.tolerance),
            passed=bool(report.passed),
            note=note,
        )
        self.add_record(record)

    def add_error(self, instance, name, exc):
        logging.error(f"Check {name} failed on {instance}: {exc}")
        self.processing_stats['errors'] += 1
        self.add_record(CheckRecord(name, instance, math.inf, None, False, f"error: {exc}"))

    def add_record(self, record):
        self.records.append(record)
        self.processing_stats['total_processed'] += 1
        if record.passed:
            self.processing_stats['passed'] += 1
        else:
            self.processing_stats['failed'] += 1

    def add_table(self, name, frame):
        self.tables[name] = frame

    def build(self):
        """Single-writer merge ordered by instance descriptor then check name"""
        ordered = sorted(self.records, key=lambda r: (r.instance, r.name))
        return SuiteReport(self.suite, ordered, self.provenance, dict(self.tables))

    def get_processing_stats(self):
        return self.processing_stats


def report_frame(report):
    return pd.DataFrame(
        [r.as_row() for r in report.records],
        columns=["name", "instance", "residual", "tolerance", "pass", "note"],
    )


def emit_report(report, fmt, output_dir):
    """Write a SuiteReport as json, csv or xlsx; returns the written paths"""
    if fmt not in ("json", "csv", "xlsx"):
        raise ValueError(f"unknown report format: {fmt}")
    os.makedirs(output_dir, exist_ok=True)
    base = os.path.join(output_dir, f"{report.suite}_report")
    written = []

    if fmt == "json":
        payload = {
            "schema_version": SCHEMA_VERSION,
            "suite": report.suite,
            "provenance": report.provenance,
            "summary": report.summary(),
            "records": [r.as_row() for r in report.records],
            "identification": {
                "relaxed_slope": "discrete_slope",
                "relaxed_upper_gradient": "min_upper_gradient",
            },
        }
        written.append(dump_json(payload, base + ".json"))

    elif fmt == "csv":
        path = base + ".csv"
        report_frame(report).to_csv(path, index=False, float_format=FLOAT_FORMAT)
        written.append(path)
        summary = report.summary()
        summary_frame = pd.DataFrame(
            [{"total": summary["total"], "passed": summary["passed"], "failed": summary["failed"]}]
        )
        summary_frame.to_csv(base + "_summary.csv", index=False)
        written.append(base + "_summary.csv")
        for name, frame in sorted(report.extra_tables.items()):
            table_path = os.path.join(output_dir, f"{report.suite}_{name}.csv")
            frame.to_csv(table_path, index=False, float_format=FLOAT_FORMAT)
            written.append(table_path)

    else:
        path = base + ".xlsx"
        save_to_excel(report_frame(report), path, sheet_name=report.suite)
        written.append(path)

    logging.info(f"Saved {len(report.records)} records to {', '.join(written)}")
    return written


def save_to_excel(df, output_file, sheet_name="Checks"):
    """Save a frame to Excel with auto-sized columns"""
    os.makedirs(os.path.dirname(os.path.abspath(output_file)), exist_ok=True)
    with pd.ExcelWriter(output_file, engine='openpyxl') as writer:
        df.to_excel(writer, sheet_name=sheet_name, index=False)
        worksheet = writer.sheets[sheet_name]

        for column in worksheet.columns:
            max_length = max((len(str(cell.value)) for cell in column if cell.value is not None), default=0)
            column_letter = column[0].column_letter
            worksheet.column_dimensions[column_letter].width = min(max_length + 2, 50)
    return output_file
