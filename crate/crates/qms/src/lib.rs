pub mod auth;
pub mod cli;
pub mod dmdgs;
pub mod docgen;
pub mod gateway;
pub mod http;
pub mod model_http;
pub mod rms;
pub mod server;
pub mod store;
