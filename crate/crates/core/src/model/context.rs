//! The time-varying mapping from application entities onto platform entities.
//!
//! Only direct mappings are stored (sensors ingest thread/core placements);
//! context at the process/job and processor/node tiers is lifted on demand
//! through the containment hierarchy.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ModelError, ModelStore, StaticGraph};
use crate::entity::{EntityId, Kind, Lifetime, Side, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextMapping {
    pub app_entity: EntityId,
    pub platform_entity: EntityId,
    pub lifetime: Lifetime,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct MappingView {
    pub app_entity: EntityId,
    pub platform_entity: EntityId,
}

/// Platform snapshot, application snapshots and the mappings between them at
/// one instant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StaticContextGraph {
    pub at: Timestamp,
    pub platform: StaticGraph,
    pub applications: BTreeMap<String, StaticGraph>,
    pub mappings: BTreeSet<MappingView>,
}

impl ModelStore {
    pub(super) fn map(
        &mut self,
        ts: Timestamp,
        app: &EntityId,
        platform: &EntityId,
    ) -> Result<(), ModelError> {
        let app_node = self
            .node(app)
            .ok_or_else(|| ModelError::UnknownEntity(app.to_string()))?;
        let platform_node = self
            .node(platform)
            .ok_or_else(|| ModelError::UnknownEntity(platform.to_string()))?;
        if app_node.kind.side() != Side::Application
            || platform_node.kind != app_node.kind.counterpart()
        {
            return Err(ModelError::KindIncompatible {
                app: app_node.kind.to_string(),
                platform: platform_node.kind.to_string(),
            });
        }
        for node in [app_node, platform_node] {
            if !node.lifetime.contains(ts) {
                return Err(ModelError::NotAliveAt {
                    id: node.id.to_string(),
                    t: ts,
                });
            }
        }
        if self.active_mapping.contains_key(app) {
            return Err(ModelError::AlreadyMapped(app.clone()));
        }
        let idx = self.mappings.len();
        self.mappings.push(ContextMapping {
            app_entity: app.clone(),
            platform_entity: platform.clone(),
            lifetime: Lifetime::open(ts),
        });
        self.active_mapping.insert(app.clone(), idx);
        for entity in [app, platform] {
            self.mappings_by_entity
                .entry(entity.clone())
                .or_default()
                .push(idx);
        }
        Ok(())
    }

    pub(super) fn unmap(&mut self, ts: Timestamp, app: &EntityId) -> Result<(), ModelError> {
        let idx = *self
            .active_mapping
            .get(app)
            .ok_or_else(|| ModelError::NotMapped(app.clone()))?;
        let mapping = &mut self.mappings[idx];
        if mapping.lifetime.start >= ts {
            return Err(ModelError::LifetimeViolation(format!(
                "mapping of `{app}` started at {} and cannot end at {ts}",
                mapping.lifetime.start
            )));
        }
        mapping.lifetime.end = Some(ts);
        self.active_mapping.remove(app);
        Ok(())
    }

    pub fn mappings(&self) -> &[ContextMapping] {
        &self.mappings
    }

    /// Direct mappings touching `id` (either side) that are active at `t`.
    fn direct_at(&self, id: &str, t: Timestamp) -> impl Iterator<Item = &ContextMapping> {
        self.mappings_by_entity
            .get(id)
            .into_iter()
            .flatten()
            .map(|&idx| &self.mappings[idx])
            .filter(move |m| m.lifetime.contains(t))
    }

    /// The platform entity an application entity is directly mapped to.
    pub fn mapped_platform(&self, app: &str, t: Timestamp) -> Option<&EntityId> {
        self.direct_at(app, t)
            .find(|m| m.app_entity.as_str() == app)
            .map(|m| &m.platform_entity)
    }

    /// Entities on the opposite side that `id` is placed on (application
    /// side) or that are placed on it (platform side) at `t`.
    pub fn context_of(&self, id: &str, t: Timestamp) -> Result<Vec<EntityId>, ModelError> {
        let node = self
            .node(id)
            .ok_or_else(|| ModelError::UnknownEntity(id.to_string()))?;
        if !node.lifetime.contains(t) {
            return Err(ModelError::NotAliveAt {
                id: id.to_string(),
                t,
            });
        }
        let target_kind = node.kind.counterpart();
        let mut out = BTreeSet::new();
        match node.kind.side() {
            Side::Application => {
                if let Some(direct) = self.mapped_platform(id, t) {
                    return Ok(vec![direct.clone()]);
                }
                if node.kind != Kind::Thread {
                    for thread in self.descendants_at(id, Kind::Thread, t) {
                        if let Some(core) = self.mapped_platform(thread.as_str(), t) {
                            if let Some(up) = self.ancestor_of_kind(core.as_str(), target_kind) {
                                out.insert(up.clone());
                            }
                        }
                    }
                }
            }
            Side::Platform => {
                out.extend(
                    self.direct_at(id, t)
                        .filter(|m| m.platform_entity.as_str() == id)
                        .map(|m| m.app_entity.clone()),
                );
                if node.kind != Kind::Core {
                    for core in self.descendants_at(id, Kind::Core, t) {
                        for m in self.direct_at(core.as_str(), t) {
                            if m.platform_entity != core {
                                continue;
                            }
                            if let Some(up) =
                                self.ancestor_of_kind(m.app_entity.as_str(), target_kind)
                            {
                                out.insert(up.clone());
                            }
                        }
                    }
                }
            }
        }
        Ok(out.into_iter().collect())
    }

    fn active_mappings_at(&self, t: Timestamp) -> BTreeSet<MappingView> {
        self.mappings
            .iter()
            .filter(|m| m.lifetime.contains(t))
            .map(|m| MappingView {
                app_entity: m.app_entity.clone(),
                platform_entity: m.platform_entity.clone(),
            })
            .collect()
    }

    pub fn global_context(&self, t: Timestamp) -> StaticContextGraph {
        StaticContextGraph {
            at: t,
            platform: self.platform_snapshot(t),
            applications: self.application_snapshots(t),
            mappings: self.active_mappings_at(t),
        }
    }

    /// Application id of the job an application entity belongs to.
    pub fn application_of(&self, id: &str) -> Option<&str> {
        self.ancestor_of_kind(id, Kind::Job).map(|job| job.stable_key())
    }

    /// The context subgraph of one application. Accepts the application id
    /// (job stable key) or the job's entity id.
    pub fn app_context_subgraph(
        &self,
        app_id: &str,
        t: Timestamp,
    ) -> Result<StaticContextGraph, ModelError> {
        let app_id = match EntityId::from_raw(app_id).kind() {
            Some(Kind::Job) => EntityId::from_raw(app_id).stable_key().to_string(),
            _ => app_id.to_string(),
        };
        let graph = self
            .application_graph(&app_id)
            .ok_or_else(|| ModelError::UnknownApplication(app_id.clone()))?;
        let snapshot = self.snapshot(graph, t)?;
        let mappings = self
            .active_mappings_at(t)
            .into_iter()
            .filter(|m| self.application_of(m.app_entity.as_str()) == Some(app_id.as_str()))
            .collect();
        let mut applications = BTreeMap::new();
        if !snapshot.is_empty() {
            applications.insert(app_id, snapshot);
        }
        Ok(StaticContextGraph {
            at: t,
            platform: self.platform_snapshot(t),
            applications,
            mappings,
        })
    }
}
