"""Trial-level evidence: parsing, emitting, snapshots and filters."""

import io
import logging
import math
from datetime import date
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
from pandas.errors import EmptyDataError, ParserError

from schema.errors import EvidenceError
from schema.models import Endpoint, EvidenceSet, TrialRecord

logger = logging.getLogger(__name__)

COLUMNS = [
    "study_id",
    "indication",
    "lhr_pfs",
    "se_pfs",
    "pfs_report_date",
    "lhr_os",
    "se_os",
    "os_report_date",
]
NUMBER_COLUMNS = ("lhr_pfs", "se_pfs", "lhr_os", "se_os")
DATE_COLUMNS = ("pfs_report_date", "os_report_date")
UTF8_BOM = "\ufeff"


def _parse_number(cell: str, column: str, row: int) -> Optional[float]:
    if not cell:
        return None
    try:
        value = float(cell)
    except ValueError:
        raise EvidenceError(f"malformed number in column '{column}'", row) from None
    if not math.isfinite(value):
        raise EvidenceError(f"malformed number in column '{column}'", row)
    return value


def _parse_date(cell: str, column: str, row: int) -> Optional[date]:
    if not cell:
        return None
    try:
        return date.fromisoformat(cell)
    except ValueError:
        raise EvidenceError(f"malformed date in column '{column}'", row) from None


def _parse_row(cells: Dict[str, str], row: int) -> TrialRecord:
    study_id = cells["study_id"]
    indication = cells["indication"]
    if not study_id:
        raise EvidenceError("missing study_id", row)
    if not indication:
        raise EvidenceError("missing indication", row)

    numbers = {column: _parse_number(cells[column], column, row) for column in NUMBER_COLUMNS}
    dates = {column: _parse_date(cells[column], column, row) for column in DATE_COLUMNS}

    if numbers["lhr_pfs"] is None and numbers["lhr_os"] is None:
        raise EvidenceError("no endpoint data", row)
    for estimate, se in (("lhr_pfs", "se_pfs"), ("lhr_os", "se_os")):
        if numbers[se] is not None and numbers[se] <= 0:
            raise EvidenceError("non-positive standard error", row)
        if numbers[estimate] is not None and numbers[se] is None:
            raise EvidenceError(f"missing standard error for '{estimate}'", row)
        if numbers[estimate] is None and numbers[se] is not None:
            raise EvidenceError(f"standard error without estimate in '{se}'", row)

    return TrialRecord(study_id=study_id, indication=indication, **numbers, **dates)


def parse_evidence(text: str) -> EvidenceSet:
    """Parse the evidence CSV dialect into a validated EvidenceSet.

    Row numbers in errors count the header as row 1. The header must list
    ``COLUMNS`` exactly and in order; a leading UTF-8 byte order mark is dropped.
    """
    if text.startswith(UTF8_BOM):
        logger.info("Dropping UTF-8 byte order mark from evidence file")
        text = text[len(UTF8_BOM):]
    try:
        frame = pd.read_csv(
            io.StringIO(text),
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=False,
        )
    except EmptyDataError:
        raise EvidenceError("no records") from None
    except ParserError as e:
        raise EvidenceError(f"malformed CSV: {e}") from None

    frame.columns = [str(column).strip() for column in frame.columns]
    missing = [column for column in COLUMNS if column not in frame.columns]
    if missing:
        raise EvidenceError(f"missing required column '{missing[0]}'", 1)
    if list(frame.columns) != COLUMNS:
        raise EvidenceError(f"header must be exactly '{','.join(COLUMNS)}'", 1)

    frame = frame.fillna("")
    records: List[TrialRecord] = []
    seen: Dict[str, int] = {}
    for position, values in enumerate(frame.itertuples(index=False, name=None)):
        row = position + 2
        cells = {column: str(value).strip() for column, value in zip(COLUMNS, values)}
        if not any(cells.values()):
            continue
        record = _parse_row(cells, row)
        if record.study_id in seen:
            raise EvidenceError(
                f"duplicate study_id '{record.study_id}' (first seen row {seen[record.study_id]})",
                row,
            )
        seen[record.study_id] = row
        records.append(record)

    if not records:
        raise EvidenceError("no records")

    evidence = EvidenceSet.from_records(records)
    logger.info(
        f"Parsed {len(records)} trial records across {evidence.n_indications} indications"
    )
    return evidence


def load_evidence(path: str | Path) -> EvidenceSet:
    """Read and parse an evidence file (UTF-8)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise EvidenceError(f"cannot read evidence file '{path}': {e.strerror}") from None
    return parse_evidence(text)


def _render(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, date):
        return value.isoformat()
    return str(value)


def emit_evidence(evidence: EvidenceSet) -> str:
    """Write an EvidenceSet in the CSV dialect read by ``parse_evidence``."""
    rows = [
        {column: _render(getattr(record, column)) for column in COLUMNS}
        for record in evidence.records
    ]
    frame = pd.DataFrame(rows, columns=COLUMNS, dtype=str)
    return frame.to_csv(index=False, lineterminator="\n")


def snapshot(evidence: EvidenceSet, cutoff: Optional[date]) -> EvidenceSet:
    """Evidence available at ``cutoff``; ``None`` means present day (everything).

    Each endpoint estimate survives only if its report date is known and not
    after the cutoff. Records left without an endpoint are dropped.
    """
    if cutoff is None:
        return evidence

    kept: List[TrialRecord] = []
    for record in evidence.records:
        update = {}
        if record.pfs_report_date is None or record.pfs_report_date > cutoff:
            update.update(lhr_pfs=None, se_pfs=None, pfs_report_date=None)
        if record.os_report_date is None or record.os_report_date > cutoff:
            update.update(lhr_os=None, se_os=None, os_report_date=None)
        if "lhr_pfs" in update and "lhr_os" in update:
            continue
        kept.append(record.model_copy(update=update) if update else record)

    result = EvidenceSet.from_records(kept)
    logger.info(
        f"Snapshot at {cutoff.isoformat()}: {len(kept)}/{len(evidence.records)} records, "
        f"{result.n_indications} indications"
    )
    if result.is_empty:
        logger.warning(f"Snapshot at {cutoff.isoformat()} contains no evidence")
    return result


def summarize(evidence: EvidenceSet) -> pd.DataFrame:
    """Per-indication counts of trials and reported estimates."""
    rows = [
        {
            "indication": label,
            "n_trials": len(records),
            "n_pfs": sum(record.has_pfs for record in records),
            "n_os": sum(record.has_os for record in records),
        }
        for label in evidence.labels
        for records in [evidence.records_for(label)]
    ]
    return pd.DataFrame(rows, columns=["indication", "n_trials", "n_pfs", "n_os"]).set_index(
        "indication"
    )


def summary_totals(table: pd.DataFrame) -> Dict[str, int]:
    """Column totals of a ``summarize`` table."""
    return {column: int(table[column].sum()) for column in ("n_trials", "n_pfs", "n_os")}


def exclude_indication(evidence: EvidenceSet, label: str) -> EvidenceSet:
    """Drop every record of one indication and re-pack the index."""
    if label not in evidence.indication_index:
        raise EvidenceError(f"unknown indication '{label}'")
    kept = [record for record in evidence.records if record.indication != label]
    logger.info(f"Excluded indication {label}: {len(evidence.records) - len(kept)} records removed")
    return EvidenceSet.from_records(kept)


def endpoint_view(evidence: EvidenceSet, endpoint: Endpoint) -> EvidenceSet:
    """Records that report ``endpoint``, for univariate syntheses."""
    kept = [record for record in evidence.records if record.estimate(endpoint)[0] is not None]
    dropped = len(evidence.records) - len(kept)
    if dropped:
        logger.info(f"{dropped} records without {endpoint.value.upper()} excluded from the fit")
    return EvidenceSet.from_records(kept)


def bivariate_view(evidence: EvidenceSet) -> EvidenceSet:
    """Records usable by the surrogacy model (PFS present; OS may be missing)."""
    kept = [record for record in evidence.records if record.has_pfs]
    dropped = len(evidence.records) - len(kept)
    if dropped:
        logger.info(f"{dropped} OS-only records excluded from the surrogacy fit")
    return EvidenceSet.from_records(kept)
