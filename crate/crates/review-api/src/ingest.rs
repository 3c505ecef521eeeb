use sha2::{Digest, Sha256};
use villa_core::pipeline::RunManifest;

use crate::model::ReviewItem;

/// Opaque id: a salted hash of everything identifying the output, so equal
/// inputs map to the same item and nothing about the method leaks.
pub fn anonymized_id(salt: &str, parts: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    for p in parts {
        h.update([0u8]);
        h.update(p.as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// One review item per (protein, iteration) record of a run.
pub fn items_from_manifest(manifest: &RunManifest, salt: &str) -> Vec<ReviewItem> {
    let method = manifest.method.as_str();
    let model = manifest.responder.name.as_str();
    manifest
        .records
        .iter()
        .map(|r| {
            let iteration = r.iteration.to_string();
            ReviewItem {
                item_id: anonymized_id(
                    salt,
                    &[
                        method,
                        model,
                        &manifest.template_id,
                        &manifest.started_at,
                        &manifest.virus,
                        &r.protein,
                        &iteration,
                    ],
                ),
                virus: manifest.virus.clone(),
                protein: r.protein.clone(),
                mutations: r.result.mutations.iter().map(|m| m.to_string()).collect(),
                reasoning: r.result.reasoning.clone(),
                method: method.to_string(),
                model: model.to_string(),
            }
        })
        .collect()
}
