//! Per-role slicing of a package: a device only loads the interactions it
//! sends or receives, the guards it can evaluate, and the declarations those
//! need.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::model::*;
use crate::parser::serialize_package;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProjectionError {
    #[error("role `{0}` is not declared in the package")]
    UnknownRole(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Send,
    Receive,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Send => "send",
            Direction::Receive => "receive",
        }
    }
}

/// One interaction as seen from the projected role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectedStep<'a> {
    pub choreography: &'a str,
    pub interaction: &'a Interaction,
    pub direction: Direction,
}

/// The slice of a package one role needs. Stored as a package so it can be
/// written out in the same document format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleProjection {
    pub role: String,
    pub package: ChoreographyPackage,
}

impl RoleProjection {
    /// Builds a projection from an already sliced package (for example a
    /// projection document read back from disk).
    pub fn from_package(role: impl Into<String>, package: ChoreographyPackage) -> Self {
        RoleProjection { role: role.into(), package }
    }

    /// Interactions of every kept choreography, in document order.
    pub fn steps(&self) -> Vec<ProjectedStep<'_>> {
        self.package
            .interactions()
            .into_iter()
            .map(|(c, i)| ProjectedStep {
                choreography: &c.name,
                interaction: i,
                direction: if i.from_role == self.role { Direction::Send } else { Direction::Receive },
            })
            .collect()
    }

    pub fn variables(&self) -> Vec<&VariableDefinition> {
        self.package
            .choreographies
            .iter()
            .flat_map(|c| c.variables.iter())
            .collect()
    }

    pub fn clones(&self) -> &[CloneType] {
        &self.package.clone_types
    }

    pub fn is_empty(&self) -> bool {
        self.steps().is_empty()
    }

    pub fn to_document(&self) -> String {
        serialize_package(&self.package)
    }

    /// Every role this projection exchanges messages with.
    pub fn counterparts(&self) -> BTreeSet<&str> {
        self.steps()
            .iter()
            .map(|s| match s.direction {
                Direction::Send => s.interaction.to_role.as_str(),
                Direction::Receive => s.interaction.from_role.as_str(),
            })
            .collect()
    }
}

/// Guesses the role a projection document was produced for: the one role
/// taking part in every interaction. `None` if that is ambiguous.
pub fn infer_role(pkg: &ChoreographyPackage) -> Option<String> {
    let mut candidates: Option<BTreeSet<&str>> = None;
    for (_, i) in pkg.interactions() {
        let pair: BTreeSet<&str> = [i.from_role.as_str(), i.to_role.as_str()].into();
        candidates = Some(match candidates {
            None => pair,
            Some(c) => c.intersection(&pair).copied().collect(),
        });
    }
    let c = candidates?;
    if c.len() == 1 {
        c.into_iter().next().map(str::to_string)
    } else {
        None
    }
}

pub fn project(pkg: &ChoreographyPackage, role: &str) -> Result<RoleProjection, ProjectionError> {
    if pkg.role(role).is_none() {
        return Err(ProjectionError::UnknownRole(role.to_string()));
    }

    let mut memo = HashMap::new();
    let names: Vec<&str> = pkg.choreographies.iter().map(|c| c.name.as_str()).collect();
    for name in &names {
        participates(pkg, role, name, &mut memo, &mut Vec::new());
    }
    let takes_part = |name: &str| memo.get(name).copied().unwrap_or(false);

    let mut choreographies = Vec::new();
    for chor in &pkg.choreographies {
        if !chor.root && !takes_part(&chor.name) {
            continue;
        }
        let body = project_activity(&chor.body, role, &takes_part).unwrap_or_else(Activity::empty);
        let mut used_vars = BTreeSet::new();
        let mut used_rels = BTreeSet::new();
        collect_uses(&body, &mut used_vars, &mut used_rels);
        choreographies.push(Choreography {
            name: chor.name.clone(),
            root: chor.root,
            relationships: chor
                .relationships
                .iter()
                .filter(|r| used_rels.contains(r.as_str()))
                .cloned()
                .collect(),
            variables: chor
                .variables
                .iter()
                .filter(|v| used_vars.contains(v.name.as_str()))
                .cloned()
                .collect(),
            body,
        });
    }

    let mut counterparts = BTreeSet::new();
    let mut rels = BTreeSet::new();
    let mut info_types = BTreeSet::new();
    let mut channel_types = BTreeSet::new();
    for chor in &choreographies {
        for i in chor.body.interactions() {
            counterparts.insert(if i.from_role == role { i.to_role.clone() } else { i.from_role.clone() });
            rels.insert(i.relationship.clone());
            for ex in &i.exchanges {
                info_types.insert(ex.information_type.clone());
            }
        }
        for v in &chor.variables {
            match &v.kind {
                VariableKind::Information(t) => info_types.insert(t.clone()),
                VariableKind::Channel(t) => channel_types.insert(t.clone()),
            };
        }
    }

    let clone_types: Vec<CloneType> = pkg
        .clone_types
        .iter()
        .filter(|c| c.role_refs.iter().any(|r| counterparts.contains(r)))
        .cloned()
        .collect();
    let channel_types: Vec<ChannelType> = pkg
        .channel_types
        .iter()
        .filter(|c| channel_types.contains(&c.name))
        .cloned()
        .collect();

    let mut roles: BTreeSet<&str> = BTreeSet::new();
    roles.insert(role);
    roles.extend(counterparts.iter().map(String::as_str));
    roles.extend(clone_types.iter().flat_map(|c| c.role_refs.iter().map(String::as_str)));
    roles.extend(channel_types.iter().map(|c| c.target_role.as_str()));
    // Guard expressions may name the projected role only, so no extra roles.

    let package = ChoreographyPackage {
        name: pkg.name.clone(),
        target_namespace: pkg.target_namespace.clone(),
        information_types: pkg
            .information_types
            .iter()
            .filter(|t| info_types.contains(&t.name))
            .cloned()
            .collect(),
        role_types: pkg
            .role_types
            .iter()
            .filter(|r| roles.contains(r.name.as_str()))
            .cloned()
            .collect(),
        relationship_types: pkg
            .relationship_types
            .iter()
            .filter(|r| rels.contains(&r.name))
            .cloned()
            .collect(),
        channel_types,
        clone_types,
        choreographies,
    };
    Ok(RoleProjection { role: role.to_string(), package })
}

/// Whether `name` contains an interaction of `role`, directly or through
/// performs. `stack` guards against perform cycles in unvalidated input.
fn participates(
    pkg: &ChoreographyPackage,
    role: &str,
    name: &str,
    memo: &mut HashMap<String, bool>,
    stack: &mut Vec<String>,
) -> bool {
    if let Some(v) = memo.get(name) {
        return *v;
    }
    if stack.iter().any(|s| s == name) {
        return false;
    }
    let Some(chor) = pkg.choreography(name) else {
        return false;
    };
    stack.push(name.to_string());
    let direct = chor.body.interactions().iter().any(|i| i.involves(role));
    let result = direct
        || chor
            .body
            .perform_targets()
            .into_iter()
            .any(|t| participates(pkg, role, t, memo, stack));
    stack.pop();
    memo.insert(name.to_string(), result);
    result
}

fn project_activity(act: &Activity, role: &str, takes_part: &dyn Fn(&str) -> bool) -> Option<Activity> {
    match act {
        Activity::Sequence(items) | Activity::Parallel(items) => {
            let kept: Vec<Activity> = items
                .iter()
                .filter_map(|a| project_activity(a, role, takes_part))
                .collect();
            if kept.is_empty() {
                return None;
            }
            Some(if matches!(act, Activity::Sequence(_)) {
                Activity::Sequence(kept)
            } else {
                Activity::Parallel(kept)
            })
        }
        Activity::WorkUnit(w) => {
            let body = project_activity(&w.body, role, takes_part)?;
            match &w.guard {
                Some(g) if g.role() != role => Some(body),
                _ => Some(Activity::WorkUnit(WorkUnit {
                    name: w.name.clone(),
                    guard: w.guard.clone(),
                    body: Box::new(body),
                })),
            }
        }
        Activity::Interaction(i) => i.involves(role).then(|| act.clone()),
        Activity::Perform(p) => takes_part(&p.choreography).then(|| act.clone()),
    }
}

fn collect_uses<'a>(act: &'a Activity, vars: &mut BTreeSet<&'a str>, rels: &mut BTreeSet<&'a str>) {
    match act {
        Activity::Sequence(items) | Activity::Parallel(items) => {
            items.iter().for_each(|a| collect_uses(a, vars, rels))
        }
        Activity::WorkUnit(w) => {
            if let Some(g) = &w.guard {
                vars.insert(g.variable());
            }
            collect_uses(&w.body, vars, rels);
        }
        Activity::Interaction(i) => {
            rels.insert(&i.relationship);
            if let Some(c) = &i.channel_variable {
                vars.insert(c);
            }
            for ex in &i.exchanges {
                vars.insert(ex.send.variable());
                vars.insert(ex.receive.variable());
            }
        }
        Activity::Perform(_) => {}
    }
}

/// Projects every declared role and checks that each global interaction shows
/// up exactly once as a send and once as a receive.
pub fn coverage_check(pkg: &ChoreographyPackage) -> bool {
    let projections: Result<Vec<_>, _> = pkg.role_types.iter().map(|r| project(pkg, &r.name)).collect();
    match projections {
        Ok(p) => coverage_of(pkg, &p),
        Err(_) => false,
    }
}

/// The counting half of [`coverage_check`], usable on any projection set.
pub fn coverage_of(pkg: &ChoreographyPackage, projections: &[RoleProjection]) -> bool {
    let mut counts: HashMap<(String, String), (usize, usize)> = pkg
        .interactions()
        .into_iter()
        .map(|(c, i)| ((c.name.clone(), i.name.clone()), (0, 0)))
        .collect();
    for p in projections {
        for step in p.steps() {
            let key = (step.choreography.to_string(), step.interaction.name.clone());
            let Some(entry) = counts.get_mut(&key) else {
                return false;
            };
            match step.direction {
                Direction::Send => entry.0 += 1,
                Direction::Receive => entry.1 += 1,
            }
        }
    }
    counts.values().all(|&c| c == (1, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{load_package, parse_package};
    use crate::testgen::valid_package;
    use proptest::prelude::*;

    const ACCIDENT: &str = include_str!("../../../corpus/annex_accident.cdl");

    fn accident() -> ChoreographyPackage {
        load_package(ACCIDENT).unwrap()
    }

    fn summary(p: &RoleProjection) -> Vec<(String, &'static str)> {
        p.steps()
            .iter()
            .map(|s| (s.interaction.name.clone(), s.direction.as_str()))
            .collect()
    }

    #[test]
    fn baliza_projection() {
        let p = project(&accident(), "BalizaRole").unwrap();
        assert_eq!(
            summary(&p),
            [
                ("reportarAccidente".to_string(), "receive"),
                ("publicarAccidente".to_string(), "send"),
                ("alertaAccidente".to_string(), "send"),
            ]
        );
        let publicar = p.package.choreography("publicarAccidente").unwrap();
        assert!(matches!(&publicar.body, Activity::Parallel(items) if items.len() == 2));
        assert!(p.package.choreography("solicitarAyudaAccidente").is_none());
        assert_eq!(infer_role(&p.package).as_deref(), Some("BalizaRole"));
        // Only VehiculoTransito has a clone, and Baliza messages it.
        assert_eq!(p.clones().len(), 1);
    }

    #[test]
    fn vehiculo_accidentado_has_one_send() {
        let p = project(&accident(), "VehiculoAccidentadoRole").unwrap();
        assert_eq!(summary(&p), [("reportarAccidente".to_string(), "send")]);
        let root = p.package.root().unwrap();
        assert_eq!(root.body, Activity::Sequence(vec![Activity::Interaction(p.steps()[0].interaction.clone())]));
        assert!(p.clones().is_empty());
    }

    #[test]
    fn foreign_guard_is_inlined() {
        let pkg = accident();
        let ce = project(&pkg, "CentralEmergenciasRole").unwrap();
        let chor = ce.package.choreography("solicitarAyudaAccidente").unwrap();
        assert!(matches!(chor.body, Activity::Interaction(_)));
        let cb = project(&pkg, "CentralBalizasRole").unwrap();
        let chor = cb.package.choreography("solicitarAyudaAccidente").unwrap();
        assert!(matches!(&chor.body, Activity::WorkUnit(w) if w.guard.is_some()));
    }

    #[test]
    fn non_participant_is_empty() {
        let mut pkg = accident();
        pkg.role_types.push(RoleType { name: "ObservadorRole".into() });
        let p = project(&pkg, "ObservadorRole").unwrap();
        assert!(p.is_empty());
        assert!(p.variables().is_empty());
        assert!(p.package.root().is_some());
    }

    #[test]
    fn unknown_role_rejected() {
        assert_eq!(
            project(&accident(), "GhostRole").unwrap_err(),
            ProjectionError::UnknownRole("GhostRole".into())
        );
    }

    #[test]
    fn projections_are_valid_documents() {
        let pkg = accident();
        for r in &pkg.role_types {
            let p = project(&pkg, &r.name).unwrap();
            let doc = p.to_document();
            let parsed = parse_package(&doc).unwrap();
            assert!(parsed.diagnostics.is_empty(), "{}: {:?}", r.name, parsed.diagnostics);
            assert_eq!(parsed.package, p.package);
            let inferred = infer_role(&parsed.package);
            assert!(inferred.is_none() || inferred.as_deref() == Some(r.name.as_str()));
        }
    }

    /// Independent oracle: count by hand over the five projections.
    #[test]
    fn accident_coverage() {
        let pkg = accident();
        assert!(coverage_check(&pkg));
        let mut total = 0;
        for r in &pkg.role_types {
            total += project(&pkg, &r.name).unwrap().steps().len();
        }
        assert_eq!(total, 8);
    }

    #[test]
    fn corrupted_projection_set_fails_coverage() {
        let pkg = accident();
        let mut all: Vec<_> = pkg.role_types.iter().map(|r| project(&pkg, &r.name).unwrap()).collect();
        assert!(coverage_of(&pkg, &all));
        // Drop CentralEmergencias's only receive.
        let ce = all.iter_mut().find(|p| p.role == "CentralEmergenciasRole").unwrap();
        ce.package.choreographies.retain(|c| c.root);
        assert!(!coverage_of(&pkg, &all));
    }

    #[test]
    fn minimal_two_role_coverage() {
        let pkg = load_package(include_str!("../../../corpus/temperature_control.cdl")).unwrap();
        assert!(coverage_check(&pkg));
    }

    fn role_order(pkg: &ChoreographyPackage, role: &str) -> Vec<String> {
        pkg.interactions()
            .into_iter()
            .filter(|(_, i)| i.involves(role))
            .map(|(c, i)| format!("{}/{}", c.name, i.name))
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn projection_properties(pkg in valid_package()) {
            prop_assert!(validate_package(&pkg).is_empty(), "{:?}", validate_package(&pkg));
            prop_assert!(coverage_check(&pkg));
            let full = serialize_package(&pkg).len();
            for r in &pkg.role_types {
                let p = project(&pkg, &r.name).unwrap();
                let steps = p.steps();
                // Minimality.
                prop_assert!(steps.iter().all(|s| s.interaction.involves(&r.name)));
                // Order preservation.
                let got: Vec<String> = steps.iter().map(|s| format!("{}/{}", s.choreography, s.interaction.name)).collect();
                prop_assert_eq!(got, role_order(&pkg, &r.name));
                // Size.
                let foreign = pkg.interactions().iter().any(|(_, i)| !i.involves(&r.name));
                if foreign {
                    prop_assert!(p.to_document().len() < full);
                }
                prop_assert!(validate_package(&p.package).is_empty(), "{:?}", validate_package(&p.package));
            }
        }

        #[test]
        fn serialize_round_trip(pkg in valid_package()) {
            let text = serialize_package(&pkg);
            let parsed = parse_package(&text).unwrap();
            prop_assert!(parsed.diagnostics.is_empty());
            prop_assert_eq!(&parsed.package, &pkg);
            prop_assert_eq!(serialize_package(&parsed.package), text);
        }
    }
}
