//! The six-action grammar and its tool-call wire format.
//!
//! Every action travels as a single JSON object of the shape
//!
//! ```text
//! {"name":"mobile_use","arguments":{"action":"click","coordinate":[x, y]}}
//! ```
//!
//! and this module is the only place that reads or writes that shape. It is
//! used verbatim in prompts, model completions, dataset files and the
//! annotation API. Coordinates are absolute pixels in the screenshot's native
//! resolution, origin top-left.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

/// The tool name every action is wrapped in.
pub const TOOL_NAME: &str = "mobile_use";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("missing argument `{0}`")]
    MissingArgument(String),
    #[error("invalid value for `{field}`: {reason}")]
    InvalidValue { field: String, reason: String },
    #[error("unexpected field `{0}`")]
    UnexpectedField(String),
}

impl ActionError {
    fn invalid(field: &str, reason: impl Into<String>) -> Self {
        ActionError::InvalidValue {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// Name of the field the error is about, if any.
    pub fn field(&self) -> Option<&str> {
        match self {
            ActionError::MalformedJson(_) => None,
            ActionError::UnknownAction(_) => Some("action"),
            ActionError::MissingArgument(f) | ActionError::UnexpectedField(f) => Some(f),
            ActionError::InvalidValue { field, .. } => Some(field),
        }
    }
}

/// A screenshot pixel coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Point {
    pub x: u32,
    pub y: u32,
}

impl Point {
    pub const fn new(x: u32, y: u32) -> Self {
        Point { x, y }
    }

    /// Checks the point against a screen of the given size.
    pub fn check_within(&self, width: u32, height: u32) -> Result<(), ActionError> {
        if self.x >= width {
            return Err(ActionError::invalid(
                "coordinate",
                format!("x={} outside screen width {width}", self.x),
            ));
        }
        if self.y >= height {
            return Err(ActionError::invalid(
                "coordinate",
                format!("y={} outside screen height {height}", self.y),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("invalid bounding box [{0}, {1}, {2}, {3}]: need x_min < x_max and y_min < y_max")]
pub struct InvalidBBox(pub u32, pub u32, pub u32, pub u32);

/// Axis-aligned pixel rectangle. Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    x_min: u32,
    y_min: u32,
    x_max: u32,
    y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self, InvalidBBox> {
        if x_min < x_max && y_min < y_max {
            Ok(BBox {
                x_min,
                y_min,
                x_max,
                y_max,
            })
        } else {
            Err(InvalidBBox(x_min, y_min, x_max, y_max))
        }
    }

    pub fn x_min(&self) -> u32 {
        self.x_min
    }
    pub fn y_min(&self) -> u32 {
        self.y_min
    }
    pub fn x_max(&self) -> u32 {
        self.x_max
    }
    pub fn y_max(&self) -> u32 {
        self.y_max
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    /// Inclusive on all four edges.
    pub fn contains(&self, p: Point) -> bool {
        (self.x_min..=self.x_max).contains(&p.x) && (self.y_min..=self.y_max).contains(&p.y)
    }

    /// Floored midpoint.
    pub fn center(&self) -> Point {
        // u64 to stay clear of overflow near u32::MAX
        let cx = (u64::from(self.x_min) + u64::from(self.x_max)) / 2;
        let cy = (u64::from(self.y_min) + u64::from(self.y_max)) / 2;
        Point::new(cx as u32, cy as u32)
    }

    pub fn to_array(&self) -> [u32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [a, b, c, d] = <[u32; 4]>::deserialize(deserializer)?;
        BBox::new(a, b, c, d).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SystemButton {
    Back,
    Home,
    Menu,
    Enter,
}

impl SystemButton {
    pub const ALL: [SystemButton; 4] = [
        SystemButton::Back,
        SystemButton::Home,
        SystemButton::Menu,
        SystemButton::Enter,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SystemButton::Back => "Back",
            SystemButton::Home => "Home",
            SystemButton::Menu => "Menu",
            SystemButton::Enter => "Enter",
        }
    }

    /// Case-insensitive; the canonical spelling is capitalized.
    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminateStatus {
    Success,
    Failure,
}

impl TerminateStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TerminateStatus::Success => "success",
            TerminateStatus::Failure => "failure",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "success" => Some(TerminateStatus::Success),
            "failure" => Some(TerminateStatus::Failure),
            _ => None,
        }
    }
}

/// A strictly positive, finite number of seconds.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct WaitTime(f64);

impl WaitTime {
    pub fn new(seconds: f64) -> Option<Self> {
        (seconds.is_finite() && seconds > 0.0).then_some(WaitTime(seconds))
    }

    pub fn seconds(&self) -> f64 {
        self.0
    }
}

impl fmt::Display for WaitTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // f64 Display is the shortest round-tripping form, "3" for 3.0
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwipeDirection {
    Up,
    Down,
    Left,
    Right,
}

impl SwipeDirection {
    pub fn opposite(&self) -> Self {
        match self {
            SwipeDirection::Up => SwipeDirection::Down,
            SwipeDirection::Down => SwipeDirection::Up,
            SwipeDirection::Left => SwipeDirection::Right,
            SwipeDirection::Right => SwipeDirection::Left,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SwipeDirection::Up => "up",
            SwipeDirection::Down => "down",
            SwipeDirection::Left => "left",
            SwipeDirection::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("swipe endpoints coincide at {0}")]
pub struct DegenerateSwipe(pub Point);

/// Direction of a swipe gesture by its dominant axis.
///
/// When `|dx| == |dy|` the horizontal axis wins.
pub fn derive_swipe_direction(from: Point, to: Point) -> Result<SwipeDirection, DegenerateSwipe> {
    if from == to {
        return Err(DegenerateSwipe(from));
    }
    let dx = i64::from(to.x) - i64::from(from.x);
    let dy = i64::from(to.y) - i64::from(from.y);
    Ok(if dx.abs() >= dy.abs() {
        if dx > 0 {
            SwipeDirection::Right
        } else {
            SwipeDirection::Left
        }
    } else if dy > 0 {
        SwipeDirection::Down
    } else {
        SwipeDirection::Up
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Click,
    Swipe,
    Type,
    SystemButton,
    Wait,
    Terminate,
}

impl ActionKind {
    pub const ALL: [ActionKind; 6] = [
        ActionKind::Click,
        ActionKind::Swipe,
        ActionKind::Type,
        ActionKind::SystemButton,
        ActionKind::Wait,
        ActionKind::Terminate,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ActionKind::Click => "click",
            ActionKind::Swipe => "swipe",
            ActionKind::Type => "type",
            ActionKind::SystemButton => "system_button",
            ActionKind::Wait => "wait",
            ActionKind::Terminate => "terminate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One GUI manipulation.
///
/// Construct through [`Action::swipe`] / [`Action::type_text`] when the
/// inputs are untrusted; the variants themselves do not re-check that swipe
/// endpoints differ or that text is non-empty.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Click { coordinate: Point },
    Swipe { coordinate: Point, coordinate2: Point },
    Type { text: String },
    SystemButton { button: SystemButton },
    Wait { time: WaitTime },
    Terminate { status: TerminateStatus },
}

impl Action {
    pub fn click(x: u32, y: u32) -> Self {
        Action::Click {
            coordinate: Point::new(x, y),
        }
    }

    pub fn swipe(from: Point, to: Point) -> Result<Self, ActionError> {
        if from == to {
            return Err(ActionError::invalid(
                "coordinate2",
                "swipe end point equals start point",
            ));
        }
        Ok(Action::Swipe {
            coordinate: from,
            coordinate2: to,
        })
    }

    pub fn type_text(text: impl Into<String>) -> Result<Self, ActionError> {
        let text = text.into();
        if text.is_empty() {
            return Err(ActionError::invalid("text", "text must be non-empty"));
        }
        Ok(Action::Type { text })
    }

    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Click { .. } => ActionKind::Click,
            Action::Swipe { .. } => ActionKind::Swipe,
            Action::Type { .. } => ActionKind::Type,
            Action::SystemButton { .. } => ActionKind::SystemButton,
            Action::Wait { .. } => ActionKind::Wait,
            Action::Terminate { .. } => ActionKind::Terminate,
        }
    }

    /// Direction of a swipe; `None` for every other variant.
    pub fn swipe_direction(&self) -> Option<Result<SwipeDirection, DegenerateSwipe>> {
        match self {
            Action::Swipe {
                coordinate,
                coordinate2,
            } => Some(derive_swipe_direction(*coordinate, *coordinate2)),
            _ => None,
        }
    }

    /// Bounds-checks every coordinate against a screen size.
    pub fn check_within(&self, width: u32, height: u32) -> Result<(), ActionError> {
        match self {
            Action::Click { coordinate } => coordinate.check_within(width, height),
            Action::Swipe {
                coordinate,
                coordinate2,
            } => {
                coordinate.check_within(width, height)?;
                coordinate2
                    .check_within(width, height)
                    .map_err(|_| ActionError::invalid("coordinate2", "outside screen"))
            }
            _ => Ok(()),
        }
    }

    /// The wire form as a JSON value (key order preserved only by
    /// [`serialize_action`]; `Value` maps are sorted).
    pub fn to_value(&self) -> Value {
        serde_json::to_value(wire(self)).expect("action wire form is always serializable")
    }

    pub fn from_value(value: &Value) -> Result<Self, ActionError> {
        let top = value
            .as_object()
            .ok_or_else(|| ActionError::invalid("$", "expected a JSON object"))?;
        reject_extra(top, &["name", "arguments"])?;
        match top.get("name") {
            None => return Err(ActionError::MissingArgument("name".into())),
            Some(Value::String(n)) if n == TOOL_NAME => {}
            Some(other) => {
                return Err(ActionError::invalid(
                    "name",
                    format!("expected \"{TOOL_NAME}\", got {other}"),
                ))
            }
        }
        let args = top
            .get("arguments")
            .ok_or_else(|| ActionError::MissingArgument("arguments".into()))?
            .as_object()
            .ok_or_else(|| ActionError::invalid("arguments", "expected a JSON object"))?;
        reject_extra(args, ALL_ARGS)?;
        let action = match args.get("action") {
            None => return Err(ActionError::MissingArgument("action".into())),
            Some(Value::String(s)) => s.as_str(),
            Some(other) => {
                return Err(ActionError::invalid(
                    "action",
                    format!("expected a string, got {other}"),
                ))
            }
        };
        let kind = ActionKind::parse(action)
            .ok_or_else(|| ActionError::UnknownAction(action.to_string()))?;

        match kind {
            ActionKind::Click => {
                reject_extra(args, &["action", "coordinate"])?;
                Ok(Action::Click {
                    coordinate: point_arg(args, "coordinate")?,
                })
            }
            ActionKind::Swipe => {
                reject_extra(args, &["action", "coordinate", "coordinate2"])?;
                let from = point_arg(args, "coordinate")?;
                let to = point_arg(args, "coordinate2")?;
                Action::swipe(from, to)
            }
            ActionKind::Type => {
                reject_extra(args, &["action", "text"])?;
                let text = str_arg(args, "text")?;
                Action::type_text(text)
            }
            ActionKind::SystemButton => {
                reject_extra(args, &["action", "button"])?;
                let raw = str_arg(args, "button")?;
                let button = SystemButton::parse(raw).ok_or_else(|| {
                    ActionError::invalid("button", format!("unknown system button `{raw}`"))
                })?;
                Ok(Action::SystemButton { button })
            }
            ActionKind::Wait => {
                reject_extra(args, &["action", "time"])?;
                let seconds = match args.get("time") {
                    None => return Err(ActionError::MissingArgument("time".into())),
                    Some(Value::Number(n)) => n.as_f64(),
                    Some(Value::String(s)) => s.trim().parse::<f64>().ok(),
                    Some(_) => None,
                };
                let time = seconds.and_then(WaitTime::new).ok_or_else(|| {
                    ActionError::invalid("time", "expected a positive number of seconds")
                })?;
                Ok(Action::Wait { time })
            }
            ActionKind::Terminate => {
                reject_extra(args, &["action", "status"])?;
                let raw = str_arg(args, "status")?;
                let status = TerminateStatus::parse(raw).ok_or_else(|| {
                    ActionError::invalid(
                        "status",
                        format!("expected \"success\" or \"failure\", got \"{raw}\""),
                    )
                })?;
                Ok(Action::Terminate { status })
            }
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_action(self))
    }
}

fn reject_extra(obj: &Map<String, Value>, allowed: &[&str]) -> Result<(), ActionError> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(ActionError::UnexpectedField(k.clone())),
        None => Ok(()),
    }
}

fn str_arg<'a>(args: &'a Map<String, Value>, field: &str) -> Result<&'a str, ActionError> {
    match args.get(field) {
        None => Err(ActionError::MissingArgument(field.to_string())),
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(ActionError::invalid(
            field,
            format!("expected a string, got {other}"),
        )),
    }
}

fn point_arg(args: &Map<String, Value>, field: &str) -> Result<Point, ActionError> {
    let value = args
        .get(field)
        .ok_or_else(|| ActionError::MissingArgument(field.to_string()))?;
    let items = match value.as_array() {
        Some(items) if items.len() == 2 => items,
        _ => {
            return Err(ActionError::invalid(
                field,
                format!("expected [x, y], got {value}"),
            ))
        }
    };
    let mut out = [0u32; 2];
    for (slot, item) in out.iter_mut().zip(items) {
        let v = item
            .as_f64()
            .filter(|v| v.is_finite())
            .ok_or_else(|| ActionError::invalid(field, format!("non-numeric coordinate {item}")))?
            .floor();
        if v < 0.0 || v > f64::from(u32::MAX) {
            return Err(ActionError::invalid(
                field,
                format!("coordinate {item} out of pixel range"),
            ));
        }
        *slot = v as u32;
    }
    Ok(Point::new(out[0], out[1]))
}

#[derive(Serialize)]
struct Wire<'a> {
    name: &'static str,
    arguments: WireArgs<'a>,
}

#[derive(Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
enum WireArgs<'a> {
    Click {
        coordinate: [u32; 2],
    },
    Swipe {
        coordinate: [u32; 2],
        coordinate2: [u32; 2],
    },
    Type {
        text: &'a str,
    },
    SystemButton {
        button: &'static str,
    },
    Wait {
        time: String,
    },
    Terminate {
        status: &'static str,
    },
}

const ALL_ARGS: &[&str] = &["action", "coordinate", "coordinate2", "text", "button", "time", "status"];

fn wire(action: &Action) -> Wire<'_> {
    let arguments = match action {
        Action::Click { coordinate } => WireArgs::Click {
            coordinate: [coordinate.x, coordinate.y],
        },
        Action::Swipe {
            coordinate,
            coordinate2,
        } => WireArgs::Swipe {
            coordinate: [coordinate.x, coordinate.y],
            coordinate2: [coordinate2.x, coordinate2.y],
        },
        Action::Type { text } => WireArgs::Type { text },
        Action::SystemButton { button } => WireArgs::SystemButton {
            button: button.as_str(),
        },
        Action::Wait { time } => WireArgs::Wait {
            time: time.to_string(),
        },
        Action::Terminate { status } => WireArgs::Terminate {
            status: status.as_str(),
        },
    };
    Wire {
        name: TOOL_NAME,
        arguments,
    }
}

/// Parses one tool-call object.
pub fn parse_action(raw: &str) -> Result<Action, ActionError> {
    let value: Value =
        serde_json::from_str(raw).map_err(|e| ActionError::MalformedJson(e.to_string()))?;
    Action::from_value(&value)
}

/// Byte-deterministic wire encoding: `name` before `arguments`, `action`
/// first inside `arguments`, wait time as a quoted string.
pub fn serialize_action(action: &Action) -> String {
    serde_json::to_string(&wire(action)).expect("action wire form is always serializable")
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        wire(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        Action::from_value(&value).map_err(serde::de::Error::custom)
    }
}
