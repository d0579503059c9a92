pub mod chunking;
pub mod embedding;
pub mod index;
