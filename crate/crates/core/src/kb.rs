//! Disease–symptom knowledge graph and encyclopedia store.
//!
//! The graph is the structured side of the knowledge base: disease nodes with
//! named symptoms. The encyclopedia is the unstructured side: one descriptive
//! passage per disease. Both are loaded from JSON documents, cross-checked,
//! and then shared read-only across sessions.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed knowledge-base document {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("duplicate disease id `{0}`")]
    DuplicateDiseaseId(String),
    #[error("disease `{id}`: {reason}")]
    InvalidDisease { id: String, reason: String },
    #[error("encyclopedia entry references unknown disease id `{0}`")]
    DanglingReference(String),
    #[error("encyclopedia passage for `{0}` is empty")]
    EmptyPassage(String),
    #[error("knowledge graph contains no diseases")]
    EmptyGraph,
    #[error("unknown disease id `{0}`")]
    UnknownDisease(String),
}

/// How strongly a symptom is tied to a disease in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Typicality {
    Core,
    Supporting,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Symptom {
    pub name: String,
    pub typicality: Typicality,
}

/// One disease node: canonical name, accepted aliases (including subtype
/// names, which count as correct diagnoses), and its symptom edges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseNode {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    pub symptoms: Vec<Symptom>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphFile {
    diseases: Vec<DiseaseNode>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EncyclopediaEntry {
    disease_id: String,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EncyclopediaFile {
    entries: Vec<EncyclopediaEntry>,
}

/// Validated, immutable disease–symptom graph. Shareable read-only across
/// parallel sessions.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    diseases: Vec<DiseaseNode>,
    by_id: HashMap<String, usize>,
    symptom_index: HashMap<String, Vec<String>>,
}

impl KnowledgeGraph {
    /// Build a graph from nodes, enforcing the structural invariants:
    /// non-empty graph, unique ids, non-empty names, no duplicate aliases,
    /// at least one symptom per disease.
    pub fn new(diseases: Vec<DiseaseNode>) -> Result<Self, KbError> {
        if diseases.is_empty() {
            return Err(KbError::EmptyGraph);
        }
        let mut by_id = HashMap::new();
        let mut symptom_index: HashMap<String, Vec<String>> = HashMap::new();
        for (idx, node) in diseases.iter().enumerate() {
            if by_id.insert(node.id.clone(), idx).is_some() {
                return Err(KbError::DuplicateDiseaseId(node.id.clone()));
            }
            if node.name.trim().is_empty() {
                return Err(KbError::InvalidDisease {
                    id: node.id.clone(),
                    reason: "canonical name is empty".into(),
                });
            }
            let mut seen = HashSet::new();
            for alias in &node.aliases {
                if !seen.insert(alias.as_str()) {
                    return Err(KbError::InvalidDisease {
                        id: node.id.clone(),
                        reason: format!("duplicate alias `{alias}`"),
                    });
                }
            }
            if node.symptoms.is_empty() {
                return Err(KbError::InvalidDisease {
                    id: node.id.clone(),
                    reason: "no symptoms attached".into(),
                });
            }
            for symptom in &node.symptoms {
                symptom_index
                    .entry(symptom.name.clone())
                    .or_default()
                    .push(node.id.clone());
            }
        }
        Ok(Self {
            diseases,
            by_id,
            symptom_index,
        })
    }

    pub fn len(&self) -> usize {
        self.diseases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diseases.is_empty()
    }

    pub fn diseases(&self) -> &[DiseaseNode] {
        &self.diseases
    }

    pub fn get(&self, disease_id: &str) -> Option<&DiseaseNode> {
        self.by_id.get(disease_id).map(|&i| &self.diseases[i])
    }

    /// Disease ids exhibiting the given symptom name.
    pub fn diseases_with_symptom(&self, symptom_name: &str) -> &[String] {
        self.symptom_index
            .get(symptom_name)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

/// Descriptive passages keyed by disease id. Every key must resolve into the
/// graph the encyclopedia was loaded against.
#[derive(Debug, Clone)]
pub struct Encyclopedia {
    entries: BTreeMap<String, String>,
}

impl Encyclopedia {
    pub fn new(
        entries: impl IntoIterator<Item = (String, String)>,
        graph: &KnowledgeGraph,
    ) -> Result<Self, KbError> {
        let mut map = BTreeMap::new();
        for (disease_id, text) in entries {
            if graph.get(&disease_id).is_none() {
                return Err(KbError::DanglingReference(disease_id));
            }
            if text.trim().is_empty() {
                return Err(KbError::EmptyPassage(disease_id));
            }
            map.insert(disease_id, text);
        }
        Ok(Self { entries: map })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn passage(&self, disease_id: &str) -> Option<&str> {
        self.entries.get(disease_id).map(String::as_str)
    }
}

/// Load and cross-validate the graph and encyclopedia documents.
pub fn load_knowledge_base(
    graph_path: &Path,
    encyclopedia_path: &Path,
) -> Result<(KnowledgeGraph, Encyclopedia), KbError> {
    let graph_text = fs::read_to_string(graph_path).map_err(|source| KbError::Io {
        path: graph_path.display().to_string(),
        source,
    })?;
    let graph_file: GraphFile =
        serde_json::from_str(&graph_text).map_err(|source| KbError::Parse {
            path: graph_path.display().to_string(),
            source,
        })?;
    let graph = KnowledgeGraph::new(graph_file.diseases)?;

    let enc_text = fs::read_to_string(encyclopedia_path).map_err(|source| KbError::Io {
        path: encyclopedia_path.display().to_string(),
        source,
    })?;
    let enc_file: EncyclopediaFile =
        serde_json::from_str(&enc_text).map_err(|source| KbError::Parse {
            path: encyclopedia_path.display().to_string(),
            source,
        })?;
    let encyclopedia = Encyclopedia::new(
        enc_file.entries.into_iter().map(|e| (e.disease_id, e.text)),
        &graph,
    )?;

    Ok((graph, encyclopedia))
}

/// Write the knowledge base back out in canonical form (pretty JSON, graph
/// node order preserved, encyclopedia entries sorted by disease id). Loading
/// and re-saving canonical files is byte-stable.
pub fn save_knowledge_base(
    graph: &KnowledgeGraph,
    encyclopedia: &Encyclopedia,
    graph_path: &Path,
    encyclopedia_path: &Path,
) -> Result<(), KbError> {
    let graph_file = GraphFile {
        diseases: graph.diseases.clone(),
    };
    let graph_json = serde_json::to_string_pretty(&graph_file).expect("graph serializes");
    fs::write(graph_path, graph_json + "\n").map_err(|source| KbError::Io {
        path: graph_path.display().to_string(),
        source,
    })?;

    let enc_file = EncyclopediaFile {
        entries: encyclopedia
            .entries
            .iter()
            .map(|(disease_id, text)| EncyclopediaEntry {
                disease_id: disease_id.clone(),
                text: text.clone(),
            })
            .collect(),
    };
    let enc_json = serde_json::to_string_pretty(&enc_file).expect("encyclopedia serializes");
    fs::write(encyclopedia_path, enc_json + "\n").map_err(|source| KbError::Io {
        path: encyclopedia_path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Draw one disease node. Pure in (graph, seed): the same pair always yields
/// the same node, and distinct seeds spread uniformly over the graph.
pub fn sample_disease(graph: &KnowledgeGraph, seed: u64) -> Result<&DiseaseNode, KbError> {
    if graph.is_empty() {
        return Err(KbError::EmptyGraph);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = rng.gen_range(0..graph.len());
    Ok(&graph.diseases[idx])
}

/// The symptom names attached to one disease node.
pub fn symptom_neighbors(
    graph: &KnowledgeGraph,
    disease_id: &str,
) -> Result<BTreeSet<String>, KbError> {
    let node = graph
        .get(disease_id)
        .ok_or_else(|| KbError::UnknownDisease(disease_id.to_string()))?;
    Ok(node.symptoms.iter().map(|s| s.name.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn sample_graph_json() -> &'static str {
        r#"{
          "diseases": [
            {"id": "d1", "name": "Influenza", "aliases": ["Flu"],
             "symptoms": [{"name": "fever", "typicality": "core"},
                          {"name": "cough", "typicality": "supporting"}]},
            {"id": "d2", "name": "Anemia", "aliases": [],
             "symptoms": [{"name": "fatigue", "typicality": "core"}]},
            {"id": "d3", "name": "Migraine", "aliases": [],
             "symptoms": [{"name": "headache", "typicality": "core"},
                          {"name": "nausea", "typicality": "supporting"}]}
          ]
        }"#
    }

    fn sample_encyclopedia_json() -> &'static str {
        r#"{
          "entries": [
            {"disease_id": "d1", "text": "A viral respiratory infection."},
            {"disease_id": "d2", "text": "A shortage of healthy red blood cells."},
            {"disease_id": "d3", "text": "A recurrent neurological headache disorder."}
          ]
        }"#
    }

    fn write_temp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn load_sample() -> (KnowledgeGraph, Encyclopedia) {
        let g = write_temp(sample_graph_json());
        let e = write_temp(sample_encyclopedia_json());
        load_knowledge_base(g.path(), e.path()).unwrap()
    }

    #[test]
    fn loads_sample_kb_with_counts_preserved() {
        let (graph, enc) = load_sample();
        assert_eq!(graph.len(), 3);
        assert_eq!(enc.len(), 3);
        assert_eq!(graph.get("d1").unwrap().name, "Influenza");
        assert_eq!(enc.passage("d2").unwrap(), "A shortage of healthy red blood cells.");
    }

    #[test]
    fn dangling_encyclopedia_reference_is_rejected() {
        let g = write_temp(sample_graph_json());
        let e = write_temp(
            r#"{"entries": [{"disease_id": "dX", "text": "No such disease."}]}"#,
        );
        let err = load_knowledge_base(g.path(), e.path()).unwrap_err();
        match err {
            KbError::DanglingReference(id) => assert_eq!(id, "dX"),
            other => panic!("expected dangling reference, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_disease_id_is_rejected_by_name() {
        let g = write_temp(
            r#"{"diseases": [
              {"id": "dup", "name": "A", "symptoms": [{"name": "x", "typicality": "core"}]},
              {"id": "dup", "name": "B", "symptoms": [{"name": "y", "typicality": "core"}]}
            ]}"#,
        );
        let e = write_temp(r#"{"entries": []}"#);
        let err = load_knowledge_base(g.path(), e.path()).unwrap_err();
        assert!(matches!(err, KbError::DuplicateDiseaseId(ref id) if id == "dup"));
        assert!(err.to_string().contains("dup"));
    }

    #[test]
    fn malformed_graph_document_is_a_parse_error() {
        let g = write_temp("{not json");
        let e = write_temp(r#"{"entries": []}"#);
        assert!(matches!(
            load_knowledge_base(g.path(), e.path()),
            Err(KbError::Parse { .. })
        ));
    }

    #[test]
    fn empty_graph_is_rejected() {
        assert!(matches!(
            KnowledgeGraph::new(vec![]),
            Err(KbError::EmptyGraph)
        ));
    }

    #[test]
    fn single_disease_graph_samples_that_disease_for_any_seed() {
        let graph = KnowledgeGraph::new(vec![DiseaseNode {
            id: "only".into(),
            name: "Only".into(),
            aliases: vec![],
            symptoms: vec![Symptom {
                name: "sign".into(),
                typicality: Typicality::Core,
            }],
        }])
        .unwrap();
        for seed in [0u64, 1, 17, u64::MAX] {
            assert_eq!(sample_disease(&graph, seed).unwrap().id, "only");
        }
    }

    #[test]
    fn sampling_is_deterministic_in_graph_and_seed() {
        let (graph, _) = load_sample();
        for seed in 0..50u64 {
            let a = sample_disease(&graph, seed).unwrap().id.clone();
            let b = sample_disease(&graph, seed).unwrap().id.clone();
            assert_eq!(a, b, "seed {seed} sampled differently on replay");
        }
    }

    #[test]
    fn sampling_spreads_roughly_uniformly_over_seeds() {
        // 3 diseases, 3000 seeds: expect 1000 each, tolerate ±10%.
        let (graph, _) = load_sample();
        let mut counts: HashMap<String, u32> = HashMap::new();
        for seed in 0..3000u64 {
            let node = sample_disease(&graph, seed).unwrap();
            *counts.entry(node.id.clone()).or_default() += 1;
        }
        assert_eq!(counts.len(), 3, "every disease should be reachable");
        for (id, count) in counts {
            assert!(
                (900..=1100).contains(&count),
                "disease {id} drawn {count} times, outside 1000 ± 10%"
            );
        }
    }

    #[test]
    fn symptom_neighbors_returns_exactly_the_attached_names() {
        let (graph, _) = load_sample();
        let names = symptom_neighbors(&graph, "d1").unwrap();
        let expected: BTreeSet<String> = ["fever", "cough"].iter().map(|s| s.to_string()).collect();
        assert_eq!(names, expected);
        // Single core symptom, no supporting ones.
        let names = symptom_neighbors(&graph, "d2").unwrap();
        assert_eq!(names.len(), 1);
        assert!(names.contains("fatigue"));
    }

    #[test]
    fn symptom_neighbors_unknown_id_errors() {
        let (graph, _) = load_sample();
        assert!(matches!(
            symptom_neighbors(&graph, "nope"),
            Err(KbError::UnknownDisease(_))
        ));
    }

    #[test]
    fn neighbors_never_contain_foreign_names() {
        let (graph, _) = load_sample();
        for node in graph.diseases() {
            let names = symptom_neighbors(&graph, &node.id).unwrap();
            let attached: BTreeSet<_> = node.symptoms.iter().map(|s| s.name.clone()).collect();
            assert_eq!(names, attached);
        }
    }

    #[test]
    fn symptom_index_maps_back_to_diseases() {
        let (graph, _) = load_sample();
        assert_eq!(graph.diseases_with_symptom("fever"), ["d1".to_string()]);
        assert!(graph.diseases_with_symptom("no-such-symptom").is_empty());
    }

    #[test]
    fn save_then_load_is_byte_stable_for_canonical_input() {
        let (graph, enc) = load_sample();
        let dir = tempfile::tempdir().unwrap();
        let g1 = dir.path().join("graph.json");
        let e1 = dir.path().join("enc.json");
        save_knowledge_base(&graph, &enc, &g1, &e1).unwrap();

        let (graph2, enc2) = load_knowledge_base(&g1, &e1).unwrap();
        let g2 = dir.path().join("graph2.json");
        let e2 = dir.path().join("enc2.json");
        save_knowledge_base(&graph2, &enc2, &g2, &e2).unwrap();

        assert_eq!(fs::read(&g1).unwrap(), fs::read(&g2).unwrap());
        assert_eq!(fs::read(&e1).unwrap(), fs::read(&e2).unwrap());
    }

    #[test]
    fn duplicate_alias_is_rejected() {
        let err = KnowledgeGraph::new(vec![DiseaseNode {
            id: "d".into(),
            name: "D".into(),
            aliases: vec!["X".into(), "X".into()],
            symptoms: vec![Symptom {
                name: "s".into(),
                typicality: Typicality::Core,
            }],
        }])
        .unwrap_err();
        assert!(matches!(err, KbError::InvalidDisease { .. }));
    }

    #[test]
    fn disease_without_symptoms_is_rejected() {
        let err = KnowledgeGraph::new(vec![DiseaseNode {
            id: "d".into(),
            name: "D".into(),
            aliases: vec![],
            symptoms: vec![],
        }])
        .unwrap_err();
        assert!(matches!(err, KbError::InvalidDisease { .. }));
    }
}
