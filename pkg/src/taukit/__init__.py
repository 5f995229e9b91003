"""Pairwise spatio-temporal clustering statistics (tau) for case data."""

__version__ = "1.0.0"

from .bands import (Band, BandSet, equal_count_bands, equal_width_bands, expanding_discs,
                    overlapping_bands, parse_band_spec)
from .errors import ConfigError, DataError, DegenerateError, TauKitError
from .estimators import (TauCurve, TauMap, cuzick_edwards_tk, tau_odds, tau_prev, tau_rate,
                         tau_spacetime_map, tau_time_form)
from .inference import (bootstrap_curves, clustering_range, global_envelope_test,
                        legacy_range_azman, permutation_null_curves, pointwise_envelope)
from .model import (CaseDataset, Episode, EpisodePanel, Individual, Person, RelatednessRule,
                    load_case_data, load_episode_panel)
from .pairing import pair_time_at_risk, tally_pairs, tally_rate
from .synth import EpidemicConfig, simulate_epidemic, simulate_null

__all__ = [
    "Band", "BandSet", "CaseDataset", "ConfigError", "DataError", "DegenerateError", "EpidemicConfig",
    "Episode", "EpisodePanel", "Individual", "Person", "RelatednessRule", "TauCurve", "TauKitError",
    "TauMap", "bootstrap_curves", "clustering_range", "cuzick_edwards_tk", "equal_count_bands",
    "equal_width_bands", "expanding_discs", "global_envelope_test", "legacy_range_azman",
    "load_case_data", "load_episode_panel", "overlapping_bands", "pair_time_at_risk",
    "parse_band_spec", "permutation_null_curves", "pointwise_envelope", "simulate_epidemic",
    "simulate_null", "tally_pairs", "tally_rate", "tau_odds", "tau_prev", "tau_rate",
    "tau_spacetime_map", "tau_time_form",
]
