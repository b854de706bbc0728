//! Session files and the preprocessing chain from raw recordings to
//! model-ready windows.

mod format;
mod preprocess;
mod session;
mod window;

pub use format::{
    format_sig9, parse_session, parse_session_str, session_checksum, write_session, write_session_string,
};
pub use preprocess::{
    calibration_span, content_to_physical, interpolate_missing, mouse_position_at, mouse_position_held,
    mouse_velocity, remap_to_screen, remap_unclamped, select_eye, Interpolated,
};
pub use session::{
    Eye, GazeSample, Intent, LabelInterval, MouseSample, Session, SessionMeta, Task, GAZE_RATE_HZ, MOUSE_RATE_HZ,
};
pub use window::{
    export_windows, import_windows, normalize, windowize, windowize_with_eye, Channels, FeatureStats, NormStats,
    PreparedSession, Window, WindowMode, DEFAULT_STRIDE, FLOATS_PER_WINDOW, MAX_MISSING, WINDOW_LEN,
    WINDOW_SECONDS,
};
