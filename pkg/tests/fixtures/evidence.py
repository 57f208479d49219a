"""Shared evidence builders."""

from datetime import date
from typing import Optional

from schema.models import EvidenceSet, TrialRecord

HEADER = "study_id,indication,lhr_pfs,se_pfs,pfs_report_date,lhr_os,se_os,os_report_date"


def record(
    study_id: str,
    indication: str,
    lhr_pfs: Optional[float] = None,
    se_pfs: Optional[float] = None,
    lhr_os: Optional[float] = None,
    se_os: Optional[float] = None,
    pfs_date: Optional[date] = None,
    os_date: Optional[date] = None,
) -> TrialRecord:
    return TrialRecord(
        study_id=study_id,
        indication=indication,
        lhr_pfs=lhr_pfs,
        se_pfs=se_pfs,
        pfs_report_date=pfs_date,
        lhr_os=lhr_os,
        se_os=se_os,
        os_report_date=os_date,
    )


def evidence(*records: TrialRecord) -> EvidenceSet:
    return EvidenceSet.from_records(list(records))


def conjugate_toy() -> EvidenceSet:
    """One study, one indication: OS log HR -0.3 with standard error 0.1."""
    return evidence(record("S1", "CRC", lhr_os=-0.3, se_os=0.1))


def two_by_two() -> EvidenceSet:
    """Two indications with two dual-endpoint studies each."""
    return evidence(
        record("A1", "CRC", -0.40, 0.10, -0.30, 0.15, date(2004, 1, 1), date(2006, 1, 1)),
        record("A2", "CRC", -0.25, 0.12, -0.20, 0.14, date(2006, 1, 1), date(2008, 1, 1)),
        record("B1", "NSCLC", -0.10, 0.11, -0.05, 0.13, date(2005, 1, 1), date(2007, 1, 1)),
        record("B2", "NSCLC", -0.30, 0.09, -0.22, 0.12, date(2007, 1, 1), date(2009, 1, 1)),
    )


def to_csv(*rows: str) -> str:
    return "\n".join([HEADER, *rows]) + "\n"
