"""Result tables and artifact files of the command-line front end."""

import logging
import math
from pathlib import Path
from typing import Dict, List, Mapping, Optional

import numpy as np
import pandas as pd

from schema.models import SharingStructure
from schema.results import (
    ConvergenceReport,
    CrossValResult,
    FitStats,
    OsPrediction,
    PosteriorDraws,
    RunManifest,
    SummaryRow,
)
from services.diagnostics import summarize_posterior
from services.model_spec import POOLED_BLOCKS, component_labels, families
from services.prediction import predict_new_indication
from utils.file_utils import write_csv, write_draws, write_json

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["quantity", "label", "group", "mean", "sd", "lo95", "median", "hi95"]
FOREST_COLUMNS = ["label", "median", "lo95", "hi95", "group"]


def _rows_for(posterior: PosteriorDraws, name: str, group: str, quantity: Optional[str] = None) -> List[SummaryRow]:
    draws = posterior.pooled(name)
    labels = component_labels(posterior.layout, name)
    return [
        summarize_posterior(draws[:, index], quantity=quantity or name, label=label, group=group)
        for index, label in enumerate(labels)
    ]


def summary_rows(posterior: PosteriorDraws, include_new_indication: bool = True) -> List[SummaryRow]:
    """Reported quantities of a fit, in a fixed order.

    Indication-level effects (or surrogacy parameters), pooled parameters,
    between-study heterogeneity, mixture probabilities (posterior mean of the
    indicator) and, for univariate sharing models, the new-indication predictive.
    """
    spec = posterior.spec
    rows: List[SummaryRow] = []
    model_families = families(spec)
    for family in model_families:
        rows += _rows_for(posterior, family.effective, "surrogacy" if spec.endpoint_mode.is_bivariate else "indication")
    for name in posterior.layout.names:
        if name in POOLED_BLOCKS:
            rows += _rows_for(posterior, name, "pooled")
    if "tau" in posterior:
        rows += _rows_for(posterior, "tau", "heterogeneity")

    seen = set()
    for family in model_families:
        if family.structure.is_mixture and family.indicator not in seen:
            seen.add(family.indicator)
            quantity = "mixture_probability" + ("" if family.indicator == "c" else f"_{family.key}")
            rows += _rows_for(posterior, family.indicator, "mixture", quantity=quantity)

    if include_new_indication and not spec.endpoint_mode.is_bivariate and spec.sharing is not SharingStructure.IP:
        rows.append(
            summarize_posterior(predict_new_indication(posterior), quantity="new_indication", label="new", group="prediction")
        )
    return rows


def summary_table(rows: List[SummaryRow]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "quantity": row.quantity,
                "label": row.label,
                "group": row.group,
                "mean": row.mean,
                "sd": row.sd,
                "lo95": row.lo95,
                "median": row.median,
                "hi95": row.hi95,
            }
            for row in rows
        ],
        columns=SUMMARY_COLUMNS,
    )


def forest_table(rows: List[SummaryRow]) -> pd.DataFrame:
    """Plot-ready intervals, one row per summary row and in the same order."""
    return pd.DataFrame(
        [
            {
                "label": row.quantity if row.label == "all" else row.label,
                "median": row.median,
                "lo95": row.lo95,
                "hi95": row.hi95,
                "group": row.quantity,
            }
            for row in rows
        ],
        columns=FOREST_COLUMNS,
    )


def convergence_table(report: ConvergenceReport) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in report.rows], columns=["quantity", "label", "rhat", "ess", "flag"])


def fit_payload(posterior: PosteriorDraws, stats: FitStats, report: Optional[ConvergenceReport] = None) -> Dict:
    spec = posterior.spec
    return {
        "endpoint_mode": spec.endpoint_mode.value,
        "sharing": spec.sharing.value,
        "sharing_psi": spec.psi_sharing.value if spec.endpoint_mode.is_bivariate else None,
        "n_indications": len(posterior.labels),
        "n_studies": len(posterior.layout.study_ids),
        "n_obs": stats.n_obs,
        "dbar": stats.dbar,
        "pd": stats.pd,
        "dic": stats.dic,
        "mean_residual_deviance": stats.mean_residual_deviance,
        "status": "warning" if report is not None and report.any_flagged else "ok",
    }


def dic_table(fits: Mapping[SharingStructure, FitStats], selected: SharingStructure) -> pd.DataFrame:
    best = min(fit.dic for fit in fits.values())
    return pd.DataFrame(
        [
            {
                "structure": structure.value,
                "dbar": fit.dbar,
                "pd": fit.pd,
                "dic": fit.dic,
                "delta_dic": fit.dic - best,
                "selected": structure is selected,
            }
            for structure, fit in fits.items()
        ],
        columns=["structure", "dbar", "pd", "dic", "delta_dic", "selected"],
    )


def predictions_table(predictions: Mapping[str, OsPrediction]) -> pd.DataFrame:
    rows = []
    for label, prediction in predictions.items():
        row = summarize_posterior(prediction.draws, quantity="d_os", label=label)
        rows.append(
            {
                "indication": label,
                "mode": prediction.mode.value,
                "include_psi": prediction.includes_conditional_variance,
                "sharing": prediction.sharing.value if prediction.sharing else "",
                "pfs_source": prediction.pfs.source_sharing.value if prediction.pfs else "",
                "pfs_mean": prediction.pfs.mean if prediction.pfs else math.nan,
                "pfs_sd": prediction.pfs.sd if prediction.pfs else math.nan,
                "mean": row.mean,
                "sd": row.sd,
                "lo95": row.lo95,
                "median": row.median,
                "hi95": row.hi95,
            }
        )
    return pd.DataFrame(rows)


CROSSVAL_COLUMNS = [
    "row_type",
    "study_id",
    "indication",
    "predicted_mean",
    "predicted_sd",
    "lo95",
    "hi95",
    "observed",
    "se_os",
    "residual",
    "inside",
    "coverage",
    "n_masked",
    "note",
]


def crossval_table(result: CrossValResult) -> pd.DataFrame:
    """Per-study residuals, one notice row per skipped indication and a coverage row."""
    rows = [{"row_type": "study", **row.model_dump()} for row in result.rows]
    rows += [
        {"row_type": "skipped", "indication": label, "note": "fewer than 2 dual-endpoint studies"}
        for label in result.skipped
    ]
    rows.append(
        {
            "row_type": "coverage",
            "indication": "all",
            "coverage": result.coverage if result.coverage is not None else math.nan,
            "n_masked": len(result.rows),
        }
    )
    return pd.DataFrame(rows, columns=CROSSVAL_COLUMNS)


def draws_for_export(posterior: PosteriorDraws) -> List[Dict[str, np.ndarray]]:
    """Per-chain arrays in layout order, then derived blocks, then the deviance trace."""
    exported = []
    for chain in posterior.chains:
        blocks = {name: chain.values[name] for name in posterior.names}
        blocks["deviance"] = chain.deviance
        exported.append(blocks)
    return exported


def write_fit_artifacts(
    out_dir: Path,
    posterior: PosteriorDraws,
    stats: FitStats,
    report: ConvergenceReport,
    write_raw_draws: bool = False,
) -> List[SummaryRow]:
    """Write summary, forest, convergence and fit files (and optionally raw draws)."""
    rows = summary_rows(posterior)
    write_csv(summary_table(rows), out_dir / "summary.csv")
    write_csv(forest_table(rows), out_dir / "forest.csv")
    write_csv(convergence_table(report), out_dir / "convergence.csv")
    write_json(fit_payload(posterior, stats, report), out_dir / "fit.json")
    if write_raw_draws:
        write_draws(draws_for_export(posterior), out_dir)
    return rows


def write_manifest(out_dir: Path, manifest: RunManifest) -> Path:
    return write_json(manifest.model_dump(), out_dir / "manifest.json")
