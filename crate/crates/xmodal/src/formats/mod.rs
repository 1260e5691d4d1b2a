pub mod ckpt;
pub mod emb;
pub mod ppm;
