pub mod ad;
pub mod cli;
mod kkt;
pub mod model;
pub mod nlp;
pub mod nlpsolve;
pub mod odeint;
pub mod report;
pub mod sim;
pub mod transcribe;
