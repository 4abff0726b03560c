pub mod diagnostics;
pub mod model;
pub mod seeding;
pub mod selection;
pub mod synthlang;
pub mod tensor;
pub mod train;
