"""Unit tests for model families, layouts and priors."""

import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import stats

from schema.errors import ModelSpecError
from schema.models import (
    EndpointMode,
    EvidenceSet,
    ModelSpec,
    PriorSettings,
    ScenarioSpec,
    SharingStructure,
    Support,
    UpdateStrategy,
)
from services.model_spec import (
    build_layout,
    build_model_data,
    component_labels,
    default_priors,
    families,
    layout_for_data,
    log_prior,
)
from services.likelihoods import log_joint, residual_deviance
from services.sampler import initial_values
from services.synthetic import generate
from tests.fixtures.evidence import evidence, record, two_by_two

UNI_OS = EndpointMode.UNIVARIATE_OS
BIV = EndpointMode.BIVARIATE


def dims(layout):
    return layout.dims()


class TestBuildLayout:
    """Block enumeration per endpoint mode and sharing structure."""

    def test_univariate_ip(self):
        layout = build_layout(ModelSpec(endpoint_mode=UNI_OS, sharing=SharingStructure.IP), two_by_two())
        assert dims(layout) == {"delta": 4, "tau": 2, "d": 2}

    def test_univariate_cp(self):
        layout = build_layout(ModelSpec(endpoint_mode=UNI_OS, sharing=SharingStructure.CP), two_by_two())
        assert dims(layout) == {"delta": 4, "tau": 2, "theta": 1}

    def test_univariate_mcip_and_mrip(self):
        mcip = build_layout(ModelSpec(endpoint_mode=UNI_OS, sharing=SharingStructure.MCIP), two_by_two())
        assert dims(mcip) == {"delta": 4, "tau": 2, "theta": 1, "d_ind": 2, "c": 2, "p": 2}
        mrip = build_layout(ModelSpec(endpoint_mode=UNI_OS, sharing=SharingStructure.MRIP), two_by_two())
        assert dims(mrip) == {"delta": 4, "tau": 2, "d": 2, "d_ind": 2, "m_d": 1, "tau_d": 1, "c": 2, "p": 2}

    def test_common_effect_within_indication_drops_study_level(self):
        spec = ModelSpec(endpoint_mode=UNI_OS, sharing=SharingStructure.RP, common_effect_within_indication=True)
        assert dims(build_layout(spec, two_by_two())) == {"d": 2, "m_d": 1, "tau_d": 1}

    def test_bivariate_mrip_untied_has_three_indicator_pairs(self):
        records = [
            record(f"S{j}{i}", f"IND{j}", -0.3, 0.1, -0.2, 0.1) for j in range(3) for i in range(2)
        ]
        layout = build_layout(ModelSpec(endpoint_mode=BIV, sharing=SharingStructure.MRIP), evidence(*records))
        indicators = [b for b in layout.blocks if b.support is Support.BINARY]

        assert [b.name for b in indicators] == ["c_lambda0", "c_lambda1", "c_psi"]
        assert sum(b.dim for b in indicators) == 9
        assert all(f"p_{key}" in layout for key in ("lambda0", "lambda1", "psi"))

    def test_bivariate_tied_mixture_shares_one_pair(self):
        spec = ModelSpec(endpoint_mode=BIV, sharing=SharingStructure.MCIP, tie_mixture_probabilities=True)
        layout = build_layout(spec, two_by_two())
        assert [b.name for b in layout.blocks if b.support is Support.BINARY] == ["c"]
        assert layout.block("p").dim == 2

    def test_independent_psi_sensitivity(self):
        spec = ModelSpec(endpoint_mode=BIV, sharing=SharingStructure.RP, sharing_psi=SharingStructure.IP)
        layout = build_layout(spec, two_by_two())
        assert "h" not in layout
        assert layout.block("psi").dim == 2
        assert "xi0" in layout and "beta1" in layout

    def test_update_strategies(self):
        layout = build_layout(ModelSpec(endpoint_mode=BIV, sharing=SharingStructure.MRIP), two_by_two())
        assert layout.block("delta1").update is UpdateStrategy.CONJUGATE_NORMAL
        assert layout.block("rho_w").update is UpdateStrategy.RANDOM_WALK
        assert layout.block("psi").support is Support.POSITIVE
        assert layout.block("c_psi").update is UpdateStrategy.CONJUGATE_BERNOULLI
        assert layout.block("p_psi").update is UpdateStrategy.CONJUGATE_BETA

    def test_missing_os_marks_latent_effects(self):
        data = evidence(record("S1", "CRC", -0.4, 0.1, -0.3, 0.1), record("S2", "CRC", -0.2, 0.1))
        layout = build_layout(ModelSpec(endpoint_mode=BIV), data)
        assert layout.block("delta2").latent == (False, True)
        assert layout.block("rho_w").dim == 1
        assert component_labels(layout, "rho_w") == ["S1"]

    def test_all_os_missing_flags_every_effect_latent(self):
        trial_set, _ = generate(ScenarioSpec(n_indications=2, trials_per_indication=3, missing_os_fraction=1.0))
        spec = ModelSpec(endpoint_mode=BIV)
        layout = layout_for_data(spec, build_model_data(spec, trial_set))

        assert all(layout.block("delta2").latent)
        assert "rho_w" not in layout
        with pytest.raises(ModelSpecError, match="both PFS and OS"):
            build_layout(spec, trial_set)

    def test_empty_evidence(self):
        with pytest.raises(ModelSpecError):
            build_layout(ModelSpec(), EvidenceSet())

    def test_no_records_for_endpoint(self):
        with pytest.raises(ModelSpecError, match="no evidence"):
            build_layout(ModelSpec(endpoint_mode=UNI_OS), evidence(record("S1", "CRC", -0.4, 0.1)))

    def test_flag_combinations_are_validated(self):
        with pytest.raises(ValidationError):
            ModelSpec(endpoint_mode=UNI_OS, tie_mixture_probabilities=True)
        with pytest.raises(ValidationError):
            ModelSpec(endpoint_mode=BIV, common_effect_within_indication=True)
        with pytest.raises(ValidationError):
            ModelSpec(endpoint_mode=UNI_OS, sharing_psi=SharingStructure.IP)


_FAMILY_SYMBOLS = {
    "d": ("theta", "m_d", "tau_d"),
    "lambda0": ("theta_lambda0", "beta0", "xi0"),
    "lambda1": ("theta_lambda1", "beta1", "xi1"),
    "psi": ("theta_psi", None, "h"),
}


def expected_blocks(spec: ModelSpec, n_studies: int, n_indications: int, n_dual: int) -> dict:
    """Block name -> dimension implied by the model equations of a spec."""
    if spec.endpoint_mode.is_bivariate:
        expected = {"delta1": n_studies, "delta2": n_studies, "rho_w": n_dual}
        keys = ("lambda0", "lambda1", "psi")
    else:
        expected = {"delta": n_studies, "tau": n_indications}
        keys = ("d",)
    for key in keys:
        structure = spec.structure_for(key) if spec.endpoint_mode.is_bivariate else spec.sharing
        common, mean, scale = _FAMILY_SYMBOLS[key]
        if structure in (SharingStructure.CP, SharingStructure.MCIP):
            expected[common] = 1
        else:
            expected[key] = n_indications
        if structure.is_mixture:
            expected[f"{key}_ind"] = n_indications
            suffix = "" if key == "d" else f"_{key}"
            expected[f"c{suffix}"] = n_indications
            expected[f"p{suffix}"] = n_indications
        if structure in (SharingStructure.RP, SharingStructure.MRIP):
            if mean is not None:
                expected[mean] = 1
            expected[scale] = 1
    return expected


class TestLayoutInvariants:
    """布局的穷举性与置换不变性"""

    @pytest.mark.parametrize("sharing", list(SharingStructure), ids=lambda s: s.value)
    @pytest.mark.parametrize("mode", list(EndpointMode), ids=lambda m: m.value)
    def test_every_symbol_maps_to_exactly_one_block(self, mode, sharing):
        trial_set = evidence(*two_by_two().records, record("A3", "CRC", -0.30, 0.10))
        spec = ModelSpec(endpoint_mode=mode, sharing=sharing)
        layout = build_layout(spec, trial_set)
        n_studies = 4 if mode is UNI_OS else 5

        assert len(layout.names) == len(set(layout.names))
        assert dims(layout) == expected_blocks(spec, n_studies, 2, 4)

    def test_reordering_studies_within_indications_permutes_only_study_blocks(self):
        spec = ModelSpec(endpoint_mode=BIV, sharing=SharingStructure.MRIP)
        original = two_by_two()
        a1, a2, b1, b2 = original.records
        reordered = evidence(a2, a1, b2, b1)
        layout, permuted = build_layout(spec, original), build_layout(spec, reordered)

        assert permuted.names == layout.names
        assert permuted.labels == layout.labels
        assert permuted.study_ids == ("A2", "A1", "B2", "B1")
        for block in layout.blocks:
            assert permuted.block(block.name).dim == block.dim
            assert permuted.block(block.name).support is block.support

        data = build_model_data(spec, original)
        values = initial_values(layout, data, chain_index=1, seed=11)
        order = [1, 0, 3, 2]
        moved = {
            name: value[order] if name in ("delta1", "delta2", "rho_w") else value for name, value in values.items()
        }
        assert log_joint(spec, reordered, moved) == pytest.approx(log_joint(spec, original, values), rel=1e-12)
        assert residual_deviance(spec, reordered, moved) == pytest.approx(residual_deviance(spec, original, values))


class TestFamilies:
    def test_univariate_family(self):
        (family,) = families(ModelSpec(sharing=SharingStructure.MRIP))
        assert (family.key, family.shared, family.local, family.effective) == ("d", "d", "d_ind", "d_eff")

    def test_bivariate_psi_follows_override(self):
        spec = ModelSpec(endpoint_mode=BIV, sharing=SharingStructure.CP, sharing_psi=SharingStructure.IP)
        structures = {family.key: family.structure for family in families(spec)}
        assert structures == {"lambda0": SharingStructure.CP, "lambda1": SharingStructure.CP, "psi": SharingStructure.IP}


class TestLogPrior:
    """Prior densities of top-level blocks."""

    def setup_method(self):
        self.spec = ModelSpec(endpoint_mode=UNI_OS, sharing=SharingStructure.IP)
        self.layout = build_layout(self.spec, two_by_two())

    def values(self, **overrides):
        base = {"delta": np.zeros(4), "tau": np.full(2, 0.5), "d": np.zeros(2)}
        base.update({k: np.asarray(v, dtype=float) for k, v in overrides.items()})
        return base

    def test_effect_at_zero_under_vague_normal(self):
        total = log_prior(self.layout, self.values(), self.spec)
        tau_part = 2 * stats.halfnorm.logpdf(0.5, scale=0.5)
        assert (total - tau_part) / 2 == pytest.approx(-3.2215, abs=1e-4)
        assert (total - tau_part) / 2 == pytest.approx(math.log(1 / (10 * math.sqrt(2 * math.pi))))

    def test_negative_scale_is_outside_support(self):
        assert log_prior(self.layout, self.values(tau=[-0.1, 0.5]), self.spec) == -np.inf

    def test_dimension_mismatch(self):
        with pytest.raises(ModelSpecError, match="expects dimension"):
            log_prior(self.layout, self.values(d=[0.0]), self.spec)

    def test_uniform_correlation_contributes_log_half(self):
        data = evidence(record("S1", "CRC", -0.4, 0.1, -0.3, 0.1))
        wide = ModelSpec(endpoint_mode=BIV)
        narrow = ModelSpec(endpoint_mode=BIV, priors=PriorSettings(rho_uniform_bounds=(-0.5, 0.5)))
        layout = build_layout(wide, data)
        values = {
            "delta1": np.zeros(1),
            "delta2": np.zeros(1),
            "rho_w": np.zeros(1),
            "lambda0": np.zeros(1),
            "lambda1": np.zeros(1),
            "psi": np.full(1, 0.5),
        }
        difference = log_prior(layout, values, wide) - log_prior(layout, values, narrow)
        assert difference == pytest.approx(math.log(0.5), abs=1e-4)
        assert log_prior(layout, {**values, "rho_w": np.ones(1)}, wide) == -np.inf


class TestDefaultPriors:
    def test_defaults(self):
        priors = default_priors()
        assert priors.tau_halfnormal_scale == 0.5
        assert priors.effect_normal_sd == 10.0
        assert (priors.h_gamma_shape, priors.h_gamma_rate) == (1.0, 0.01)
        assert priors == PriorSettings()

    def test_invalid_bounds(self):
        with pytest.raises(ValidationError):
            PriorSettings(rho_uniform_bounds=(0.5, -0.5))
        with pytest.raises(ValidationError):
            PriorSettings(mixture_beta=(0.0, 1.0))
