//! Losses, metrics, synthetic subjects, training and evaluation.

pub mod eval;
pub mod loss;
pub mod synthetic;
pub mod train;

pub use loss::{loss_tape, loss_total, mask_iou, psnr, ssim, ssim_tape, LossEval, LossTerms, LossWeights, Umbrella, PSNR_SENTINEL};
pub use synthetic::{make_synthetic_subject, mesh_coverage, orbit_camera, render_reference, BodyPose, ReferenceImage, SyntheticSubject};
pub use train::{hstack, reference_view, sample_views, stream, train, train_with, IterationRow, SampleGrid, TrainConfig, TrainResult, ViewSpec};
pub use eval::{baseline_checkpoint, evaluate, evaluate_reference, held_out_views, mean_of, render_gom, summarize, write_csv, EvalConfig, MetricsRow, SummaryRow, HELD_OUT_BASE};
