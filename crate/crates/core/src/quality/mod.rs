//! Image quality: blur scores, hair flagging and near-duplicate detection.

mod combine;
mod dhash;
mod fourier;
mod gray;
mod laplacian;
mod wavelet;

pub use combine::{
    combined_blur_score, hair_flag, percentile, scan_files, score_image, threshold_sweep, CombineOutcome,
    CombineWeights, QualityScore, Sweep, SweepPoint, DEFAULT_BLUR_THRESHOLD, DEFAULT_HAIR_PERCENTILE,
};
pub use dhash::{area_resize, dhash, duplicate_pairs, find_duplicates, DuplicatePair};
pub use fourier::{fourier_score, magnitude_spectrum, MAGNITUDE_FRACTION};
pub use gray::{gaussian_blur, to_gray, GrayImage};
pub use laplacian::laplacian_score;
pub use wavelet::{wavelet_sharpness, WaveletConfig, WaveletSharpness, DEFAULT_EDGE_THRESHOLD};
