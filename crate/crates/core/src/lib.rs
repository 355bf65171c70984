//! Matrix-variate dynamic linear models for voxel-wise fMRI activation maps.

pub mod design;
pub mod dlm;
pub mod error;
pub mod group;
pub mod linalg;
pub mod sampling;
pub mod simulate;
pub mod trajectories;
pub mod volume;

pub use design::{
    canonical_hrf, expected_bold, load_design, DesignMatrix, HrfParams, StimulusSpec,
};
pub use dlm::{
    filter_step, run_filter, CovarianceSchedule, ModelConfig, PosteriorSequence, PosteriorState,
};
pub use error::{Error, ErrorCategory, Result};
pub use group::{
    check_compatible, combine_voxel, group_combine, group_contrast, map_group, GroupDistribution,
    GroupMaps, GroupSampler, SummaryCursor, SummarySource,
};
pub use simulate::{
    assess_fpr, dice, fictitious_designs, generate_phantom, generate_resting, FprReport,
    NoiseModel, Paradigm, Phantom, PhantomSpec, Region,
};
pub use trajectories::{
    contrast_evidence, effect_projection, evidence, fest_draw, ffbs_draw, fsts_draw, map_subject,
    model_design, voxel_evidence, Algorithm, EffectDistribution, EffectKind, EffectTrajectory,
    EvidenceResult, EvidenceVolume, MapOptions, SamplerPlan, SubjectMaps, VoxelFailure,
    VoxelSampler, DEFAULT_DRAWS, DEFAULT_THRESHOLD,
};
pub use volume::summary::{
    load_summary, save_summary, SubjectSummary, SummaryMeta, SummaryReader, SummarySink,
    SummaryWriter,
};
pub use volume::{
    build_mask, read_mask, read_nifti, read_volume, write_nifti, write_volume, Bold4D,
    ClusterIndex, MaskStrategy, NiftiHeader,
};
