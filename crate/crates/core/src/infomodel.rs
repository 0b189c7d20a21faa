//! Per-microdatabase type system: types with single inheritance, instances
//! bound to column stores, free-form classification tags, and a browse
//! surface. Several models can be federated into one namespaced view.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::value::{Object, Value, ValueKind};

pub const MAX_TAG_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropertyType {
    Bool,
    Int,
    Float,
    Str,
    Bytes,
    /// Nested object of the named type (same model unless qualified).
    Object(String),
}

impl PropertyType {
    fn kind(&self) -> ValueKind {
        match self {
            PropertyType::Bool => ValueKind::Bool,
            PropertyType::Int => ValueKind::Int,
            PropertyType::Float => ValueKind::Float,
            PropertyType::Str => ValueKind::Str,
            PropertyType::Bytes => ValueKind::Bytes,
            PropertyType::Object(_) => ValueKind::Object,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyDef {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: PropertyType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

impl PropertyDef {
    pub fn new(name: impl Into<String>, ty: PropertyType) -> Self {
        Self {
            name: name.into(),
            ty,
            unit: None,
        }
    }

    pub fn unit(mut self, unit: impl Into<String>) -> Self {
        self.unit = Some(unit.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeDef {
    #[serde(default)]
    pub model_id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default)]
    pub properties: Vec<PropertyDef>,
}

impl TypeDef {
    pub fn new(model_id: impl Into<String>, name: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            name: name.into(),
            parent: None,
            properties: Vec::new(),
        }
    }

    pub fn extends(mut self, parent: impl Into<String>) -> Self {
        self.parent = Some(parent.into());
        self
    }

    pub fn property(mut self, p: PropertyDef) -> Self {
        self.properties.push(p);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceDef {
    #[serde(default)]
    pub model_id: String,
    pub name: String,
    #[serde(rename = "type")]
    pub type_name: String,
    pub store: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubjectKind {
    Type,
    Property,
    Instance,
}

/// Classification label on a type (`Pump`), a declared property
/// (`Pump.flow`) or an instance (`p1`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tag {
    #[serde(default)]
    pub model_id: String,
    #[serde(rename = "kind")]
    pub subject_kind: SubjectKind,
    pub subject: String,
    pub label: String,
}

impl Tag {
    pub fn new(model_id: &str, subject_kind: SubjectKind, subject: &str, label: &str) -> Self {
        Self {
            model_id: model_id.into(),
            subject_kind,
            subject: subject.into(),
            label: label.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Model {
    pub id: String,
    pub types: BTreeMap<String, TypeDef>,
    pub instances: BTreeMap<String, InstanceDef>,
    pub tags: BTreeSet<Tag>,
}

impl Model {
    fn own_tags(&self, kind: SubjectKind, subject: &str) -> BTreeSet<String> {
        self.tags
            .iter()
            .filter(|t| t.subject_kind == kind && t.subject == subject)
            .map(|t| t.label.clone())
            .collect()
    }

    /// Type followed by its ancestors, nearest first.
    fn lineage(&self, name: &str) -> Vec<&TypeDef> {
        let mut out = Vec::new();
        let mut cur = self.types.get(name);
        while let Some(t) = cur {
            if out.iter().any(|seen: &&TypeDef| seen.name == t.name) {
                break;
            }
            out.push(t);
            cur = t.parent.as_deref().and_then(|p| self.types.get(p));
        }
        out
    }

    /// Every property of `name` including inherited ones, as
    /// `(declaring type, property)`, root ancestor first.
    pub fn property_closure(&self, name: &str) -> Vec<(&str, &PropertyDef)> {
        self.lineage(name)
            .into_iter()
            .rev()
            .flat_map(|t| t.properties.iter().map(move |p| (t.name.as_str(), p)))
            .collect()
    }

    pub fn is_subtype(&self, child: &str, ancestor: &str) -> bool {
        self.lineage(child).iter().any(|t| t.name == ancestor)
    }

    /// Labels reported for an instance: its own, its type's and every
    /// ancestor type's. Computed on demand, never copied.
    pub fn instance_tags(&self, instance: &str) -> BTreeSet<String> {
        let mut tags = self.own_tags(SubjectKind::Instance, instance);
        if let Some(inst) = self.instances.get(instance) {
            for t in self.lineage(&inst.type_name) {
                tags.extend(self.own_tags(SubjectKind::Type, &t.name));
            }
        }
        tags
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum NodeKind {
    Model,
    Type,
    Property,
    Instance,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeKind::Model => "model",
            NodeKind::Type => "type",
            NodeKind::Property => "property",
            NodeKind::Instance => "instance",
        })
    }
}

/// One browse result; displays as `<kind>\t<qualified-name>\t<tags>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    pub tags: Vec<String>,
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.kind, self.name, self.tags.join(","))
    }
}

enum BrowsePath<'a> {
    Models,
    Types,
    Type(&'a str),
    Instances,
    Instance(&'a str),
}

fn parse_path(path: &str) -> Result<BrowsePath<'_>> {
    let bad = || Error::BadPath(path.to_string());
    let rest = path.strip_prefix('/').ok_or_else(bad)?;
    let (head, tail) = match rest.split_once('/') {
        Some((h, t)) => (h, Some(t)),
        None => (rest, None),
    };
    match (head, tail) {
        ("models" | "", None) => Ok(BrowsePath::Models),
        ("types", None) => Ok(BrowsePath::Types),
        ("instances", None) => Ok(BrowsePath::Instances),
        ("types", Some(n)) if !n.is_empty() && !n.contains('/') => Ok(BrowsePath::Type(n)),
        ("instances", Some(n)) if !n.is_empty() && !n.contains('/') => Ok(BrowsePath::Instance(n)),
        _ => Err(bad()),
    }
}

/// A federated view: several models browsed together, every qualified name
/// prefixed with `<model_id>:`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FederatedView {
    models: Vec<String>,
}

impl FederatedView {
    pub fn models(&self) -> &[String] {
        &self.models
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoModel {
    pub models: BTreeMap<String, Model>,
}

impl InfoModel {
    pub fn model(&self, id: &str) -> Option<&Model> {
        self.models.get(id)
    }

    pub fn ensure_model(&mut self, id: &str) {
        self.models.entry(id.to_string()).or_insert_with(|| Model {
            id: id.to_string(),
            ..Default::default()
        });
    }

    /// Define a batch of types atomically. Parents may refer forward within
    /// the batch; the combined inheritance graph must stay acyclic and no
    /// type may redeclare an inherited property name.
    pub fn define_types(&mut self, defs: &[TypeDef]) -> Result<()> {
        let mut staged = self.models.clone();
        for def in defs {
            if def.model_id.is_empty() || def.name.is_empty() {
                return Err(Error::InvalidConfig(
                    "type needs a model id and a name".into(),
                ));
            }
            if def.name.contains(':') || def.name.contains('.') || def.name.contains('/') {
                return Err(Error::InvalidConfig(format!(
                    "type name {} may not contain ':', '.' or '/'",
                    def.name
                )));
            }
            let model = staged.entry(def.model_id.clone()).or_insert_with(|| Model {
                id: def.model_id.clone(),
                ..Default::default()
            });
            if model.types.contains_key(&def.name) {
                return Err(Error::Duplicate(format!(
                    "type {}:{}",
                    def.model_id, def.name
                )));
            }
            let mut seen = BTreeSet::new();
            for p in &def.properties {
                if !seen.insert(p.name.as_str()) {
                    return Err(Error::Duplicate(format!(
                        "property {}.{}",
                        def.name, p.name
                    )));
                }
            }
            model.types.insert(def.name.clone(), def.clone());
        }

        for def in defs {
            let model = &staged[&def.model_id];
            // Cycle check walks parents until a root or a repeat.
            let mut cur = def.name.as_str();
            let mut visited = BTreeSet::from([cur]);
            while let Some(parent) = model.types[cur].parent.as_deref() {
                if !model.types.contains_key(parent) {
                    return Err(Error::UnknownParent(format!(
                        "{}:{} extends {parent}",
                        def.model_id, cur
                    )));
                }
                if !visited.insert(parent) {
                    return Err(Error::CyclicInheritance(format!(
                        "{}:{} reaches {parent} twice",
                        def.model_id, def.name
                    )));
                }
                cur = parent;
            }
            let mut names = BTreeMap::new();
            for (decl, p) in model.property_closure(&def.name) {
                if let Some(prev) = names.insert(p.name.as_str(), decl) {
                    return Err(Error::Duplicate(format!(
                        "property {} of {}:{} declared by both {prev} and {decl}",
                        p.name, def.model_id, def.name
                    )));
                }
            }
            for p in &def.properties {
                if let PropertyType::Object(r) = &p.ty {
                    resolve_in(&staged, &def.model_id, r)?;
                }
            }
        }
        self.models = staged;
        Ok(())
    }

    pub fn define_type(&mut self, def: TypeDef) -> Result<()> {
        self.define_types(std::slice::from_ref(&def))
    }

    pub fn define_instance(&mut self, def: InstanceDef, store_exists: bool) -> Result<()> {
        let model = self
            .models
            .get_mut(&def.model_id)
            .ok_or_else(|| Error::UnknownModel(def.model_id.clone()))?;
        if !model.types.contains_key(&def.type_name) {
            return Err(Error::UnknownSubject(format!(
                "type {}:{}",
                def.model_id, def.type_name
            )));
        }
        if !store_exists {
            return Err(Error::UnknownStore(def.store.clone()));
        }
        if model.instances.contains_key(&def.name) {
            return Err(Error::Duplicate(format!(
                "instance {}:{}",
                def.model_id, def.name
            )));
        }
        model.instances.insert(def.name.clone(), def);
        Ok(())
    }

    fn subject_exists(&self, tag: &Tag) -> bool {
        let Some(model) = self.models.get(&tag.model_id) else {
            return false;
        };
        match tag.subject_kind {
            SubjectKind::Type => model.types.contains_key(&tag.subject),
            SubjectKind::Instance => model.instances.contains_key(&tag.subject),
            SubjectKind::Property => tag.subject.split_once('.').is_some_and(|(t, p)| {
                model
                    .types
                    .get(t)
                    .is_some_and(|td| td.properties.iter().any(|pd| pd.name == p))
            }),
        }
    }

    pub fn classify(&mut self, tag: Tag) -> Result<()> {
        if tag.label.is_empty()
            || tag.label.chars().count() > MAX_TAG_LEN
            || tag.label.contains(',')
        {
            return Err(Error::InvalidConfig(format!(
                "tag label must be 1..={MAX_TAG_LEN} chars without commas: {:?}",
                tag.label
            )));
        }
        if !self.subject_exists(&tag) {
            return Err(Error::UnknownSubject(format!(
                "{:?} {}:{}",
                tag.subject_kind, tag.model_id, tag.subject
            )));
        }
        let model = self.models.get_mut(&tag.model_id).expect("checked above");
        if model.tags.contains(&tag) {
            return Err(Error::DuplicateTag(format!(
                "{} on {}:{}",
                tag.label, tag.model_id, tag.subject
            )));
        }
        model.tags.insert(tag);
        Ok(())
    }

    pub fn unclassify(&mut self, tag: &Tag) -> Result<()> {
        let removed = self
            .models
            .get_mut(&tag.model_id)
            .is_some_and(|m| m.tags.remove(tag));
        if removed {
            Ok(())
        } else {
            Err(Error::NotFound(format!(
                "tag {} on {}:{}",
                tag.label, tag.model_id, tag.subject
            )))
        }
    }

    /// Resolve `model:Type` or a bare `Type` that exactly one model defines.
    pub fn resolve_type(&self, type_ref: &str) -> Result<(String, String)> {
        if let Some((m, t)) = type_ref.split_once(':') {
            return match self.models.get(m) {
                Some(model) if model.types.contains_key(t) => Ok((m.to_string(), t.to_string())),
                _ => Err(Error::InvalidConfig(format!("unknown type {type_ref}"))),
            };
        }
        let hits: Vec<&str> = self
            .models
            .values()
            .filter(|m| m.types.contains_key(type_ref))
            .map(|m| m.id.as_str())
            .collect();
        match hits.as_slice() {
            [m] => Ok((m.to_string(), type_ref.to_string())),
            [] => Err(Error::InvalidConfig(format!("unknown type {type_ref}"))),
            _ => Err(Error::InvalidConfig(format!(
                "ambiguous type {type_ref}: defined in {}",
                hits.join(", ")
            ))),
        }
    }

    /// Check `value` against the type named by `type_ref`. Every property of
    /// the type's closure must be present with the declared kind; extra fields
    /// are rejected.
    pub fn validate(&self, type_ref: &str, value: &Value) -> Result<()> {
        let (m, t) = self
            .resolve_type(type_ref)
            .map_err(|e| Error::SchemaViolation(e.to_string()))?;
        self.validate_in(&m, &t, value, type_ref)
    }

    fn validate_in(
        &self,
        model_id: &str,
        type_name: &str,
        value: &Value,
        path: &str,
    ) -> Result<()> {
        let Value::Object(obj) = value else {
            return Err(Error::SchemaViolation(format!(
                "{path}: expected object of type {type_name}, got {}",
                value.kind()
            )));
        };
        let model = &self.models[model_id];
        let actual = match &obj.type_ref {
            None => type_name.to_string(),
            Some(r) => {
                let (rm, rt) = resolve_in(&self.models, model_id, r)
                    .map_err(|e| Error::SchemaViolation(e.to_string()))?;
                if rm != model_id || !model.is_subtype(&rt, type_name) {
                    return Err(Error::SchemaViolation(format!(
                        "{path}: {r} is not a {type_name}"
                    )));
                }
                rt
            }
        };
        self.validate_fields(model, &actual, obj, path)
    }

    fn validate_fields(
        &self,
        model: &Model,
        type_name: &str,
        obj: &Object,
        path: &str,
    ) -> Result<()> {
        let closure = model.property_closure(type_name);
        for (_, prop) in &closure {
            let field_path = format!("{path}.{}", prop.name);
            let v = obj
                .fields
                .get(&prop.name)
                .ok_or_else(|| Error::SchemaViolation(format!("{field_path}: missing")))?;
            match &prop.ty {
                PropertyType::Object(r) => {
                    let (rm, rt) = resolve_in(&self.models, &model.id, r)?;
                    self.validate_in(&rm, &rt, v, &field_path)?;
                }
                ty if ty.kind() != v.kind() => {
                    return Err(Error::SchemaViolation(format!(
                        "{field_path}: expected {}, got {}",
                        ty.kind(),
                        v.kind()
                    )));
                }
                _ => {}
            }
        }
        if let Some(extra) = obj
            .fields
            .keys()
            .find(|k| !closure.iter().any(|(_, p)| &p.name == *k))
        {
            return Err(Error::SchemaViolation(format!(
                "{path}.{extra}: not a property of {type_name}"
            )));
        }
        Ok(())
    }

    /// Labels carried by any instance bound to `store`, propagation included.
    pub fn store_tags(&self, store: &str) -> BTreeSet<String> {
        self.models
            .values()
            .flat_map(|m| {
                m.instances
                    .values()
                    .filter(|i| i.store == store)
                    .flat_map(move |i| m.instance_tags(&i.name))
            })
            .collect()
    }

    /// Browse one model with unqualified names.
    pub fn browse_model(&self, model_id: &str, path: &str, tag: Option<&str>) -> Result<Vec<Node>> {
        let model = self
            .models
            .get(model_id)
            .ok_or_else(|| Error::UnknownModel(model_id.into()))?;
        let mut nodes = browse_one(model, &parse_path(path)?, "", path)?;
        finish(&mut nodes, tag);
        Ok(nodes)
    }

    pub fn federate(&self, ids: &[String]) -> Result<FederatedView> {
        if let Some(missing) = ids.iter().find(|id| !self.models.contains_key(*id)) {
            return Err(Error::UnknownModel(missing.clone()));
        }
        let mut models = ids.to_vec();
        models.sort();
        models.dedup();
        Ok(FederatedView { models })
    }

    pub fn federate_all(&self) -> FederatedView {
        FederatedView {
            models: self.models.keys().cloned().collect(),
        }
    }

    pub fn browse(&self, view: &FederatedView, path: &str, tag: Option<&str>) -> Result<Vec<Node>> {
        let parsed = parse_path(path)?;
        let mut nodes = Vec::new();
        match parsed {
            BrowsePath::Type(q) | BrowsePath::Instance(q) => {
                let (m, name) = q
                    .split_once(':')
                    .ok_or_else(|| Error::BadPath(format!("{path}: expected <model>:<name>")))?;
                if !view.models.iter().any(|v| v == m) {
                    return Err(Error::BadPath(format!("{path}: model {m} not in view")));
                }
                let model = self
                    .models
                    .get(m)
                    .ok_or_else(|| Error::UnknownModel(m.into()))?;
                let inner = match parsed {
                    BrowsePath::Type(_) => BrowsePath::Type(name),
                    _ => BrowsePath::Instance(name),
                };
                nodes = browse_one(model, &inner, &format!("{m}:"), path)?;
            }
            _ => {
                for id in &view.models {
                    let model = self
                        .models
                        .get(id)
                        .ok_or_else(|| Error::UnknownModel(id.clone()))?;
                    nodes.extend(browse_one(model, &parsed, &format!("{id}:"), path)?);
                }
            }
        }
        finish(&mut nodes, tag);
        Ok(nodes)
    }
}

fn resolve_in(
    models: &BTreeMap<String, Model>,
    default_model: &str,
    r: &str,
) -> Result<(String, String)> {
    let (m, t) = r.split_once(':').unwrap_or((default_model, r));
    match models.get(m) {
        Some(model) if model.types.contains_key(t) => Ok((m.to_string(), t.to_string())),
        _ => Err(Error::InvalidConfig(format!("unknown type {r}"))),
    }
}

fn finish(nodes: &mut Vec<Node>, tag: Option<&str>) {
    if let Some(label) = tag {
        nodes.retain(|n| n.tags.iter().any(|t| t == label));
    }
    nodes.sort();
}

fn sorted(tags: BTreeSet<String>) -> Vec<String> {
    tags.into_iter().collect()
}

fn browse_one(model: &Model, path: &BrowsePath<'_>, prefix: &str, raw: &str) -> Result<Vec<Node>> {
    let prop_nodes = |type_name: &str, owner: Option<&str>| -> Vec<Node> {
        model
            .property_closure(type_name)
            .into_iter()
            .map(|(decl, p)| {
                let qualified = format!("{decl}.{}", p.name);
                Node {
                    name: format!("{prefix}{}.{}", owner.unwrap_or(decl), p.name),
                    kind: NodeKind::Property,
                    tags: sorted(model.own_tags(SubjectKind::Property, &qualified)),
                }
            })
            .collect()
    };
    Ok(match path {
        BrowsePath::Models => {
            vec![Node {
                name: model.id.clone(),
                kind: NodeKind::Model,
                tags: Vec::new(),
            }]
        }
        BrowsePath::Types => model
            .types
            .keys()
            .map(|t| Node {
                name: format!("{prefix}{t}"),
                kind: NodeKind::Type,
                tags: sorted(model.own_tags(SubjectKind::Type, t)),
            })
            .collect(),
        BrowsePath::Type(t) => {
            if !model.types.contains_key(*t) {
                return Err(Error::BadPath(format!("{raw}: no type {t}")));
            }
            prop_nodes(t, None)
        }
        BrowsePath::Instances => model
            .instances
            .keys()
            .map(|i| Node {
                name: format!("{prefix}{i}"),
                kind: NodeKind::Instance,
                tags: sorted(model.instance_tags(i)),
            })
            .collect(),
        BrowsePath::Instance(i) => {
            let inst = model
                .instances
                .get(*i)
                .ok_or_else(|| Error::BadPath(format!("{raw}: no instance {i}")))?;
            prop_nodes(&inst.type_name, Some(i))
        }
    })
}
