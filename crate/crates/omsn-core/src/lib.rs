pub mod element;
pub mod tensor;
