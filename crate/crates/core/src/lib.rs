pub mod tensor;
pub mod geometry;
pub mod viewgen;
pub mod vrpe;
pub mod loss;
pub mod model;
pub mod data;
pub mod trainer;
pub mod verify;
