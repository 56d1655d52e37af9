pub mod alloc_sim;
pub mod gather;
pub mod golden;
pub mod gradcheck;
pub mod plugins;
pub mod streams;

/// Tests in one binary run on parallel threads; anything that calls
/// backward takes this lock so the global gate never turns them away.
pub static BACKWARD: parking_lot::Mutex<()> = parking_lot::Mutex::new(());
