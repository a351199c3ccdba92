pub mod bench;
pub mod gen;
pub mod report;
pub mod train;
