pub mod augment;
pub mod downstream;
pub mod interp;
pub mod numcore;
pub mod ssl;
pub mod train;
pub mod vit3d;
pub mod volio;
