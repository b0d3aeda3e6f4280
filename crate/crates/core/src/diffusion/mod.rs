pub mod checkpoint;
pub mod latent;
pub mod model;
pub mod schedule;
pub mod train;
pub mod unet;
