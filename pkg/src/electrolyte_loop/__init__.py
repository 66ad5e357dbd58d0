"""Closed-loop Bayesian optimization of electrolyte conductivity."""

from .analytics import (
    EfficiencyReport,
    HumanModel,
    RobotModel,
    efficiency_report,
    overall_speedup,
    sample_efficiency,
    time_efficiency,
)
from .campaign import (
    CampaignConfig,
    CampaignLog,
    CandidateRule,
    HighMolalityAbove,
    LowMolalityAbove,
    TopConductivity,
    TopWithSolventPresent,
    best_so_far,
    read_log,
    replay,
    run_campaign,
    select_candidates,
)
from .composition import (
    DesignAxes,
    DomainGrid,
    DosePlan,
    Electrolyte,
    FeederSolution,
    SolventBlend,
    axes_to_electrolyte,
    electrolyte_to_axes,
    enumerate_grid,
    estimate_density,
    plan_dose,
)
from .planner import (
    AcquisitionKind,
    GaussianProcessSurrogate,
    ObservationSet,
    PlannerConfig,
    acq_ei,
    acq_thompson,
    acq_ttei,
    acq_ucb,
    fit_gp,
    gp_predict,
    next_point,
)
from .virtual_lab import (
    CellConstant,
    ConductivitySurface,
    ImpedanceSpectrum,
    LabConfig,
    LabState,
    MeasurementRecord,
    SurfaceParams,
    calibrate_cell_constant,
    calibrate_surface,
    extract_conductivity,
    new_lab,
    rinse,
    run_measurement,
    simulate_impedance,
    true_conductivity,
)

__version__ = "0.1.0"
