pub mod esc;
pub mod feedforward;
pub mod grid;
pub mod kv;
pub mod imaging;
pub mod numeric;
pub mod plant;
pub mod run;
pub mod samplegen;
pub mod sim;
pub mod spectrum;
pub mod stc;
