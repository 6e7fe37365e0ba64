//! Standalone module forwards on stored weights, shared by the CLI and the C ABI.

use std::fmt;
use std::str::FromStr;

use crate::blocks::{C2f, C2fConfig, UnitKind};
use crate::dafm::{self, Dafm, DafmConfig};
use crate::dsconv::{Dsconv, DsconvConfig};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::oahead::{Oahead, OaheadConfig};
use crate::rng::Rng;
use crate::store::WeightStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModuleKind {
    Dafm,
    Oahead,
    Dsconv,
    C2fDsconv,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 4] = [ModuleKind::Dafm, ModuleKind::Oahead, ModuleKind::Dsconv, ModuleKind::C2fDsconv];

    /// Also the weight-path prefix the module is stored under.
    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Dafm => "dafm",
            ModuleKind::Oahead => "oahead",
            ModuleKind::Dsconv => "dsconv",
            ModuleKind::C2fDsconv => "c2f_dsconv",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModuleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown module `{s}` (expected dafm, oahead, dsconv or c2f_dsconv)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Module {
    Dafm(Dafm),
    Oahead(Oahead),
    Dsconv(Dsconv),
    C2fDsconv(C2f),
}

impl Module {
    /// Configuration is read back from the stored weight dims.
    pub fn from_store(kind: ModuleKind, store: &WeightStore) -> Result<Self> {
        let p = kind.name();
        let m = match kind {
            ModuleKind::Dafm => Module::Dafm(Dafm::from_store(p, store)?),
            ModuleKind::Oahead => Module::Oahead(Oahead::from_store(p, store)?),
            ModuleKind::Dsconv => Module::Dsconv(Dsconv::from_store(p, store)?),
            ModuleKind::C2fDsconv => Module::C2fDsconv(C2f::dsconv_from_store(p, store, true, Activation::Silu)?),
        };
        match &m {
            Module::Dafm(x) => x.check_store(store)?,
            Module::Oahead(x) => x.check_store(store)?,
            Module::Dsconv(x) => x.check_store(store)?,
            Module::C2fDsconv(x) => x.check_store(store)?,
        }
        Ok(m)
    }

    /// Default configuration for `channels`, randomly initialized.
    pub fn init(kind: ModuleKind, channels: usize, rng: &mut Rng) -> Result<(Self, WeightStore)> {
        let p = kind.name();
        let mut store = WeightStore::new();
        let m = match kind {
            ModuleKind::Dafm => {
                let m = Dafm::new(p, DafmConfig::new(channels))?;
                m.init(&mut store, rng)?;
                Module::Dafm(m)
            }
            ModuleKind::Oahead => {
                let m = Oahead::new(p, OaheadConfig::new(channels))?;
                m.init(&mut store, rng)?;
                Module::Oahead(m)
            }
            ModuleKind::Dsconv => {
                let m = Dsconv::new(p, DsconvConfig::new(channels))?;
                m.init(&mut store, rng)?;
                Module::Dsconv(m)
            }
            ModuleKind::C2fDsconv => {
                let m = C2f::new(p, C2fConfig::new(channels, channels, 1, UnitKind::dsconv()))?;
                m.init(&mut store, rng)?;
                Module::C2fDsconv(m)
            }
        };
        Ok((m, store))
    }

    /// Zeroes every DAFM conv so the forward reduces to its residual path.
    pub fn make_residual_only(&self, store: &mut WeightStore) -> Result<()> {
        match self {
            Module::Dafm(m) => {
                dafm::residual_only(m, store);
                Ok(())
            }
            _ => Err(Error::Config("residual-only weights exist only for dafm".into())),
        }
    }

    pub fn forward(&self, store: &WeightStore, x: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let p = t.bind(store);
        let xv = t.leaf(x.clone());
        let y = match self {
            Module::Dafm(m) => m.forward(&mut t, &p, xv)?,
            Module::Oahead(m) => m.forward(&mut t, &p, xv)?,
            Module::Dsconv(m) => m.forward(&mut t, &p, xv)?,
            Module::C2fDsconv(m) => m.forward(&mut t, &p, xv)?,
        };
        Ok(t.value(y).clone())
    }
}
