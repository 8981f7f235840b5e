pub mod bench;
pub mod confsvc;
pub mod engine;
pub mod heap;
pub mod imgfmt;
pub mod kvapp;
pub mod managers;
pub mod restore;
pub mod storesvc;
pub mod wire;
