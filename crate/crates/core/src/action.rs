//! Discrete movement and camera-rotation tokens, their canonical sentences,
//! and quantization of continuous motion into them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DEAD_ZONE_T: f64 = 0.05;
pub const DEFAULT_DEAD_ZONE_R: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum HumanToken {
    W,
    A,
    S,
    D,
    WA,
    WD,
    SA,
    SD,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CameraToken {
    Right,
    Left,
    Up,
    Down,
    UpRight,
    DownRight,
    DownLeft,
    Still,
}

impl HumanToken {
    pub const ALL: [HumanToken; 9] = [
        HumanToken::W,
        HumanToken::A,
        HumanToken::S,
        HumanToken::D,
        HumanToken::WA,
        HumanToken::WD,
        HumanToken::SA,
        HumanToken::SD,
        HumanToken::None,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            HumanToken::W => "W",
            HumanToken::A => "A",
            HumanToken::S => "S",
            HumanToken::D => "D",
            HumanToken::WA => "W+A",
            HumanToken::WD => "W+D",
            HumanToken::SA => "S+A",
            HumanToken::SD => "S+D",
            HumanToken::None => "None",
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            HumanToken::W => "moves forward",
            HumanToken::A => "moves left",
            HumanToken::S => "moves backward",
            HumanToken::D => "moves right",
            HumanToken::WA => "moves forward and left",
            HumanToken::WD => "moves forward and right",
            HumanToken::SA => "moves backward and left",
            HumanToken::SD => "moves backward and right",
            HumanToken::None => "stands still",
        }
    }

    /// Symbol shown in parentheses; the still token shows a middle dot.
    fn mark(self) -> &'static str {
        match self {
            HumanToken::None => "·",
            t => t.symbol(),
        }
    }

    pub fn sentence(self) -> String {
        format!("Camera {} ({}).", self.phrase(), self.mark())
    }
}

impl CameraToken {
    pub const ALL: [CameraToken; 8] = [
        CameraToken::Right,
        CameraToken::Left,
        CameraToken::Up,
        CameraToken::Down,
        CameraToken::UpRight,
        CameraToken::DownRight,
        CameraToken::DownLeft,
        CameraToken::Still,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            CameraToken::Right => "→",
            CameraToken::Left => "←",
            CameraToken::Up => "↑",
            CameraToken::Down => "↓",
            CameraToken::UpRight => "↑→",
            CameraToken::DownRight => "↓→",
            CameraToken::DownLeft => "↓←",
            CameraToken::Still => "·",
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            CameraToken::Right => "turns right",
            CameraToken::Left => "turns left",
            CameraToken::Up => "tilts up",
            CameraToken::Down => "tilts down",
            CameraToken::UpRight => "tilts up and turns right",
            CameraToken::DownRight => "tilts down and turns right",
            CameraToken::DownLeft => "tilts down and turns left",
            CameraToken::Still => "remains still",
        }
    }

    pub fn sentence(self) -> String {
        format!("Camera {} ({}).", self.phrase(), self.symbol())
    }
}

impl fmt::Display for HumanToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl fmt::Display for CameraToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

fn unknown(kind: &str, s: &str) -> Error {
    Error::Parse {
        position: 0,
        message: format!("unknown {kind} token {s:?}"),
    }
}

impl FromStr for HumanToken {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t == "·" {
            return Ok(HumanToken::None);
        }
        HumanToken::ALL
            .into_iter()
            .find(|h| h.symbol() == t)
            .ok_or_else(|| unknown("movement", s))
    }
}

/// Maps ASCII aliases `R L U D` (and `.`) onto the arrow symbols.
fn canonical_arrows(s: &str) -> String {
    s.chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| match c {
            'R' => '→',
            'L' => '←',
            'U' => '↑',
            'D' => '↓',
            '.' => '·',
            c => c,
        })
        .collect()
}

impl FromStr for CameraToken {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = canonical_arrows(s);
        CameraToken::ALL
            .into_iter()
            .find(|c| c.symbol() == t)
            .ok_or_else(|| unknown("camera", s))
    }
}

impl TryFrom<String> for HumanToken {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<HumanToken> for String {
    fn from(t: HumanToken) -> Self {
        t.symbol().to_string()
    }
}

impl TryFrom<String> for CameraToken {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CameraToken> for String {
    fn from(t: CameraToken) -> Self {
        t.symbol().to_string()
    }
}

/// Motion over one window: translation `(right, forward)` in metres and
/// rotation `(yaw, pitch)` in degrees; positive yaw turns right, positive
/// pitch tilts up.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionSample {
    pub translation: (f64, f64),
    pub rotation: (f64, f64),
}

fn sign(v: f64, dz: f64) -> i8 {
    if v > dz {
        1
    } else if v < -dz {
        -1
    } else {
        0
    }
}

pub fn quantize_translation(m: &MotionSample, dead_zone: f64) -> HumanToken {
    let (right, fwd) = m.translation;
    match (sign(fwd, dead_zone), sign(right, dead_zone)) {
        (1, 1) => HumanToken::WD,
        (1, -1) => HumanToken::WA,
        (1, _) => HumanToken::W,
        (-1, 1) => HumanToken::SD,
        (-1, -1) => HumanToken::SA,
        (-1, _) => HumanToken::S,
        (_, 1) => HumanToken::D,
        (_, -1) => HumanToken::A,
        _ => HumanToken::None,
    }
}

/// Up-and-left has no token; it falls back to whichever axis moved more,
/// yaw winning ties.
pub fn quantize_rotation(m: &MotionSample, dead_zone_deg: f64) -> CameraToken {
    let (yaw, pitch) = m.rotation;
    match (sign(pitch, dead_zone_deg), sign(yaw, dead_zone_deg)) {
        (1, 1) => CameraToken::UpRight,
        (1, -1) => {
            if pitch.abs() > yaw.abs() {
                CameraToken::Up
            } else {
                CameraToken::Left
            }
        }
        (1, _) => CameraToken::Up,
        (-1, 1) => CameraToken::DownRight,
        (-1, -1) => CameraToken::DownLeft,
        (-1, _) => CameraToken::Down,
        (_, 1) => CameraToken::Right,
        (_, -1) => CameraToken::Left,
        _ => CameraToken::Still,
    }
}

pub fn render_action_text(h: HumanToken, c: CameraToken) -> String {
    format!("{} {}", h.sentence(), c.sentence())
}

struct Cursor<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            position: self.pos,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        let rest = &self.s[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn expect(&mut self, word: &str) -> Result<()> {
        self.skip_ws();
        if self.s[self.pos..].starts_with(word) {
            self.pos += word.len();
            Ok(())
        } else {
            Err(self.err(format!("expected {word:?}")))
        }
    }

    /// Text up to (not including) `stop`, with whitespace runs collapsed.
    fn until(&mut self, stop: char) -> Result<(usize, String)> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.s[self.pos..];
        let Some(i) = rest.find(stop) else {
            return Err(self.err(format!("expected {stop:?}")));
        };
        self.pos += i;
        Ok((
            start,
            rest[..i].split_whitespace().collect::<Vec<_>>().join(" "),
        ))
    }

    fn sentence(&mut self) -> Result<(usize, String, usize, String)> {
        self.expect("Camera")?;
        let (p_at, phrase) = self.until('(')?;
        self.expect("(")?;
        let (s_at, symbol) = self.until(')')?;
        self.expect(")")?;
        self.skip_ws();
        if self.s[self.pos..].starts_with('.') {
            self.pos += 1;
        }
        Ok((p_at, phrase, s_at, symbol))
    }
}

/// Inverse of [`render_action_text`]. Whitespace is free, the trailing
/// periods are optional, and camera symbols may use `R L U D`.
pub fn parse_action_text(s: &str) -> Result<(HumanToken, CameraToken)> {
    let mut cur = Cursor { s, pos: 0 };
    let (p_at, phrase, s_at, symbol) = cur.sentence()?;
    let human = HumanToken::ALL
        .into_iter()
        .find(|h| h.phrase() == phrase)
        .ok_or_else(|| Error::Parse {
            position: p_at,
            message: format!("unknown movement phrase {phrase:?}"),
        })?;
    if symbol != human.mark() && symbol != human.symbol() {
        return Err(Error::Parse {
            position: s_at,
            message: format!("symbol {symbol:?} does not match {:?}", human.phrase()),
        });
    }
    let (p_at, phrase, s_at, symbol) = cur.sentence()?;
    let camera = CameraToken::ALL
        .into_iter()
        .find(|c| c.phrase() == phrase)
        .ok_or_else(|| Error::Parse {
            position: p_at,
            message: format!("unknown camera phrase {phrase:?}"),
        })?;
    if canonical_arrows(&symbol) != camera.symbol() {
        return Err(Error::Parse {
            position: s_at,
            message: format!("symbol {symbol:?} does not match {:?}", camera.phrase()),
        });
    }
    cur.skip_ws();
    if cur.pos != s.len() {
        return Err(cur.err("trailing text"));
    }
    Ok((human, camera))
}

/// Mean motion of each run of `window` samples (the last run may be short).
pub fn window_means(samples: &[MotionSample], window: usize) -> Vec<MotionSample> {
    samples
        .chunks(window.max(1))
        .map(|w| {
            let n = w.len() as f64;
            let mut m = MotionSample::default();
            for s in w {
                m.translation.0 += s.translation.0 / n;
                m.translation.1 += s.translation.1 / n;
                m.rotation.0 += s.rotation.0 / n;
                m.rotation.1 += s.rotation.1 / n;
            }
            m
        })
        .collect()
}

pub fn quantize_trajectory(
    samples: &[MotionSample],
    window: usize,
    dead_zone_t: f64,
    dead_zone_r: f64,
) -> Result<Vec<(HumanToken, CameraToken)>> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    if dead_zone_t < 0.0 || dead_zone_r < 0.0 {
        return Err(Error::InvalidArgument(
            "dead zones must be non-negative".into(),
        ));
    }
    Ok(window_means(samples, window)
        .iter()
        .map(|m| {
            (
                quantize_translation(m, dead_zone_t),
                quantize_rotation(m, dead_zone_r),
            )
        })
        .collect())
}
