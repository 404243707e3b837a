//! Core of a small swarm coordination stack: data model, pub-sub middleware,
//! vehicle model, mission state machine, formation math, coordinator logic,
//! payload handling and the sans-IO ground station.

pub mod coordinator;
pub mod formation;
pub mod groundstation;
pub mod messages;
pub mod middleware;
pub mod mission;
pub mod model;
pub mod payload;
pub mod vehicle;
