"""Information criteria for singular models from tempered-posterior samples.

The package computes WAIC, WBIC, the functional variance, the Imai
estimate of the learning coefficient and a WAIC estimate built from the
WBIC posterior alone, and runs replication experiments that check their
asymptotic relations.
"""

from .criteria import (
    REPORT_FIELDS,
    CriteriaError,
    CriteriaReport,
    LinkedWAIC,
    PosteriorFunctionals,
    bayes_generalization_loss,
    bayes_training_loss,
    criteria_report,
    equation_of_state_residuals,
    functional_variance,
    functionals,
    gibbs_generalization_loss,
    gibbs_training_loss,
    imai_lambda,
    linked_waic,
    linked_waic_general_beta,
    optimum_loss_estimate,
    singular_fluctuation_hat,
    waic,
    wbic,
)
from .harness import AggregateReport, ConfigError, ExperimentConfig, derive_seed, run_experiment, write_outputs
from .model_api import (
    Dataset,
    Model,
    ModelError,
    PriorShifted,
    TruthMeta,
    empirical_loss,
    expected_loss_mc,
    load_csv,
    sample_truth,
    wbic_beta,
)
from .models import ConjugateNormalMeanModel, GaussianMixtureModel, ReducedRankRegressionModel, build_model
from .oracle import (
    ConjugateOracleResult,
    OracleError,
    QuadratureOracle,
    build_quadrature,
    conjugate_bayes_gen_loss,
    conjugate_exact,
    quadrature_expectation,
    quadrature_functionals,
)
from .sampler import (
    Chain,
    SamplerConfig,
    SamplerError,
    effective_sample_size,
    posterior_expectation,
    posterior_variance,
    rhat,
    run_chain,
)

__version__ = "0.1.0"
