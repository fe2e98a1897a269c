"""Semiparametric estimators of the average treatment effect on the treated."""

from .basis import BasisSpec, DesignMatrix, build_design, power_design
from .bootstrap import Pipeline, bootstrap_many, bootstrap_se, estimate, run_pipeline
from .data import Dataset, VariableRoles, load_csv, split_by_treatment, write_csv
from .diagnostics import BalanceReport, UnconfoundednessTest, balance_asd, unconfoundedness_q_test
from .errors import (ConfigurationError, DataError, NonConvergenceError, NumericalError,
                     PattError, SingularFitError)
from .estimators import (AttWeights, EstimateResult, MatchConfig, estimate_dr, estimate_mix,
                         estimate_reg, estimate_wt, match_controls)
from .propensity import PropensityFit, fit_logit, loocv_mse_ps, trim_extreme, undersmooth
from .series import CvTable, SeriesFit, fit_ols, loocv_mse, predict
from .simulation import DgpConfig, SimulationReport, generate_sample, run_monte_carlo, true_patt

__version__ = "0.1.0"
