use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::codeclm::{AdapterKind, LoraAdapter, ModelConfig};
use crate::error::{Error, Result};

/// Named adapters available to new requests.
///
/// Requests resolve names to `Arc`s at admission, so unloading only hides a
/// name from later requests; in-flight work keeps the version it pinned.
#[derive(Debug)]
pub struct AdapterRegistry {
    model: ModelConfig,
    adapters: RwLock<BTreeMap<String, Arc<LoraAdapter>>>,
    epoch: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AdapterInfo {
    pub name: String,
    pub kind: AdapterKind,
    pub rank: usize,
    pub alpha: f32,
}

impl AdapterRegistry {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            adapters: RwLock::new(BTreeMap::new()),
            epoch: AtomicU64::new(0),
        }
    }

    /// Register (or replace) an adapter under its own name.
    pub fn load(&self, adapter: LoraAdapter) -> Result<AdapterInfo> {
        adapter.check_compatible(&self.model)?;
        if adapter.name.is_empty() {
            return Err(Error::BadContainer("adapter name is empty".into()));
        }
        let info = AdapterInfo {
            name: adapter.name.clone(),
            kind: adapter.kind,
            rank: adapter.rank,
            alpha: adapter.alpha,
        };
        self.adapters
            .write()
            .unwrap()
            .insert(adapter.name.clone(), Arc::new(adapter));
        self.epoch.fetch_add(1, Ordering::SeqCst);
        Ok(info)
    }

    pub fn load_bytes(&self, bytes: &[u8]) -> Result<AdapterInfo> {
        self.load(LoraAdapter::from_bytes(bytes)?)
    }

    pub fn unload(&self, name: &str) -> Result<()> {
        self.adapters
            .write()
            .unwrap()
            .remove(name)
            .ok_or_else(|| Error::UnknownAdapter(name.to_string()))?;
        self.epoch.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    pub fn epoch(&self) -> u64 {
        self.epoch.load(Ordering::SeqCst)
    }

    pub fn list(&self) -> Vec<AdapterInfo> {
        self.adapters
            .read()
            .unwrap()
            .values()
            .map(|a| AdapterInfo {
                name: a.name.clone(),
                kind: a.kind,
                rank: a.rank,
                alpha: a.alpha,
            })
            .collect()
    }

    /// Resolve a request's adapter names into the stack it will run with:
    /// at most one domain and one speaker adapter, domain first.
    pub fn resolve(&self, names: &[String]) -> Result<Vec<Arc<LoraAdapter>>> {
        let map = self.adapters.read().unwrap();
        let mut domain = None;
        let mut speaker = None;
        for name in names {
            let a = map
                .get(name)
                .ok_or_else(|| Error::UnknownAdapter(name.clone()))?;
            let slot = match a.kind {
                AdapterKind::Domain => &mut domain,
                AdapterKind::Speaker => &mut speaker,
            };
            if slot.is_some() {
                return Err(Error::invalid(format!(
                    "more than one {} adapter requested",
                    a.kind
                )));
            }
            *slot = Some(Arc::clone(a));
        }
        Ok(domain.into_iter().chain(speaker).collect())
    }
}
