use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", stringify!($name), " {:?}"), s))),
                }
            }
        }
    };
}

keyword_enum!(Fusion { Early => "early", Late => "late" });
keyword_enum!(EncoderKind { Mlp => "mlp", Transformer => "transformer" });
keyword_enum!(ConcatTarget { Text => "text", Visual => "visual" });
// What fills the imagination slots: encoded imaginations, or the mean
// noun-phrase text embeddings of the same sub-instructions.
keyword_enum!(SlotSource { Imagination => "imagination", TextMean => "text_mean" });

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub d: usize,
    pub heads: usize,
    pub cross_layers: usize,
    pub k: usize,
    pub d_v: usize,
    pub vocab: usize,
    pub mlp_hidden: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub fusion: Fusion,
    pub encoder: EncoderKind,
    pub concat_target: ConcatTarget,
    pub slot_source: SlotSource,
    /// Adds a sinusoidal index code to imagination tokens.
    pub order_encoding: bool,
}

pub fn default_mlp_hidden(d: usize) -> usize {
    (2 * d).div_ceil(3)
}

impl AgentConfig {
    pub fn new(d: usize, k: usize, d_v: usize, vocab: usize) -> Self {
        Self {
            d,
            heads: 4,
            cross_layers: 2,
            k,
            d_v,
            vocab,
            mlp_hidden: default_mlp_hidden(d),
            ffn_hidden: 2 * d,
            dropout: 0.15,
            fusion: Fusion::Early,
            encoder: EncoderKind::Mlp,
            concat_target: ConcatTarget::Text,
            slot_source: SlotSource::Imagination,
            order_encoding: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.k == 0 || self.d_v == 0 || self.vocab == 0 || self.mlp_hidden == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("agent dimensions must be positive".into()));
        }
        Ok(())
    }

    /// `key = value` lines, the `[agent]` section of config and checkpoint
    /// files.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("d", self.d.to_string()),
            ("heads", self.heads.to_string()),
            ("cross_layers", self.cross_layers.to_string()),
            ("k", self.k.to_string()),
            ("d_v", self.d_v.to_string()),
            ("vocab", self.vocab.to_string()),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("dropout", self.dropout.to_string()),
            ("fusion", self.fusion.to_string()),
            ("encoder", self.encoder.to_string()),
            ("concat_target", self.concat_target.to_string()),
            ("slot_source", self.slot_source.to_string()),
            ("order_encoding", self.order_encoding.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "d" => {
                self.d = num(key, value)?;
                self.mlp_hidden = default_mlp_hidden(self.d);
                self.ffn_hidden = 2 * self.d;
            }
            "heads" => self.heads = num(key, value)?,
            "cross_layers" => self.cross_layers = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "d_v" => self.d_v = num(key, value)?,
            "vocab" => self.vocab = num(key, value)?,
            "mlp_hidden" => self.mlp_hidden = num(key, value)?,
            "ffn_hidden" => self.ffn_hidden = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "fusion" => self.fusion = value.parse()?,
            "encoder" => self.encoder = value.parse()?,
            "concat_target" => self.concat_target = value.parse()?,
            "slot_source" => self.slot_source = value.parse()?,
            "order_encoding" => self.order_encoding = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown agent setting {key:?}"))),
        }
        Ok(())
    }
}
