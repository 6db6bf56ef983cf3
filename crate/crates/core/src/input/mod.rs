//! Input mixtures from images and point clouds.

pub mod em;
pub mod fit;
pub mod io;
pub mod kmeans;

pub use em::{em_until_converged, weighted_em_step, weighted_log_likelihood, weighted_responsibilities, EmRun};
pub use fit::{
    fit_image_mixture, fit_pointcloud_mixture, fit_points, normalize_dataset, Image, Normalization, PointFitMethod,
};
pub use io::{load_mnist, read_idx_images, read_idx_labels, read_point_cloud, MnistSplit};
pub use kmeans::{weighted_kmeans, KMeans, WeightedPointSet};
