//! In-memory model of the supported WS-CDL subset plus the `cloneType`
//! extension, and the referential-integrity checker over it.
//!
//! Names are stored as local names: namespace prefixes such as `tns:` are
//! stripped by the parser before they reach the model.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// A parsed global choreography package.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChoreographyPackage {
    pub name: String,
    pub target_namespace: Option<String>,
    pub information_types: Vec<InformationType>,
    pub role_types: Vec<RoleType>,
    pub relationship_types: Vec<RelationshipType>,
    pub channel_types: Vec<ChannelType>,
    pub clone_types: Vec<CloneType>,
    pub choreographies: Vec<Choreography>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InformationType {
    pub name: String,
    /// Value of the `type` attribute, kept verbatim (e.g. `xsd:string`).
    pub type_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleType {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationshipType {
    pub name: String,
    pub role_a: String,
    pub role_b: String,
}

impl RelationshipType {
    pub fn connects(&self, a: &str, b: &str) -> bool {
        (self.role_a == a && self.role_b == b) || (self.role_a == b && self.role_b == a)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelType {
    pub name: String,
    pub target_role: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloneUsage {
    /// Replacement serves one interaction attempt only.
    OnDemand,
    /// Once activated the replacement stays bound for the rest of the execution.
    #[default]
    Permanent,
}

impl CloneUsage {
    pub fn as_str(self) -> &'static str {
        match self {
            CloneUsage::OnDemand => "on-demand",
            CloneUsage::Permanent => "permanent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "on-demand" => Some(CloneUsage::OnDemand),
            "permanent" => Some(CloneUsage::Permanent),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloneType {
    pub name: String,
    pub interface: Option<String>,
    pub usage: CloneUsage,
    pub role_refs: Vec<String>,
    /// Network address of the replacement device. Usually supplied by the
    /// deployment (scenario) rather than the document.
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Choreography {
    pub name: String,
    pub root: bool,
    pub relationships: Vec<String>,
    pub variables: Vec<VariableDefinition>,
    pub body: Activity,
}

impl Choreography {
    pub fn variable(&self, name: &str) -> Option<&VariableDefinition> {
        self.variables.iter().find(|v| v.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableDefinition {
    pub name: String,
    pub kind: VariableKind,
    pub mutable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VariableKind {
    Information(String),
    Channel(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Activity {
    Sequence(Vec<Activity>),
    Parallel(Vec<Activity>),
    WorkUnit(WorkUnit),
    Interaction(Interaction),
    Perform(Perform),
}

impl Activity {
    pub fn empty() -> Self {
        Activity::Sequence(Vec::new())
    }

    /// Depth-first, document-order visit of every interaction in this tree.
    /// Performs are not followed.
    pub fn interactions(&self) -> Vec<&Interaction> {
        let mut out = Vec::new();
        self.collect_interactions(&mut out);
        out
    }

    fn collect_interactions<'a>(&'a self, out: &mut Vec<&'a Interaction>) {
        match self {
            Activity::Sequence(items) | Activity::Parallel(items) => {
                items.iter().for_each(|a| a.collect_interactions(out))
            }
            Activity::WorkUnit(w) => w.body.collect_interactions(out),
            Activity::Interaction(i) => out.push(i),
            Activity::Perform(_) => {}
        }
    }

    /// Names of choreographies targeted by a `perform` anywhere in this tree.
    pub fn perform_targets(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_performs(&mut out);
        out
    }

    fn collect_performs<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Activity::Sequence(items) | Activity::Parallel(items) => {
                items.iter().for_each(|a| a.collect_performs(out))
            }
            Activity::WorkUnit(w) => w.body.collect_performs(out),
            Activity::Interaction(_) => {}
            Activity::Perform(p) => out.push(&p.choreography),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkUnit {
    pub name: String,
    pub guard: Option<CdlExpression>,
    pub body: Box<Activity>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Perform {
    pub choreography: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub name: String,
    pub channel_variable: Option<String>,
    pub operation: String,
    pub initiate: bool,
    pub relationship: String,
    pub from_role: String,
    pub to_role: String,
    pub exchanges: Vec<Exchange>,
    pub timeout: Option<CdlDuration>,
}

impl Interaction {
    pub fn involves(&self, role: &str) -> bool {
        self.from_role == role || self.to_role == role
    }

    pub fn request(&self) -> Option<&Exchange> {
        self.exchanges
            .iter()
            .find(|e| e.action == ExchangeAction::Request)
    }

    pub fn respond(&self) -> Option<&Exchange> {
        self.exchanges
            .iter()
            .find(|e| e.action == ExchangeAction::Respond)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExchangeAction {
    Request,
    Respond,
}

impl ExchangeAction {
    pub fn as_str(self) -> &'static str {
        match self {
            ExchangeAction::Request => "request",
            ExchangeAction::Respond => "respond",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exchange {
    pub action: ExchangeAction,
    pub name: String,
    pub information_type: String,
    pub send: CdlExpression,
    pub receive: CdlExpression,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CdlExpression {
    GetVariable { variable: String, role: String },
    IsVariableAvailable { variable: String, role: String },
}

impl CdlExpression {
    pub fn variable(&self) -> &str {
        match self {
            CdlExpression::GetVariable { variable, .. }
            | CdlExpression::IsVariableAvailable { variable, .. } => variable,
        }
    }

    pub fn role(&self) -> &str {
        match self {
            CdlExpression::GetVariable { role, .. }
            | CdlExpression::IsVariableAvailable { role, .. } => role,
        }
    }
}

impl fmt::Display for CdlExpression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CdlExpression::GetVariable { variable, role } => {
                write!(f, "cdl:getVariable(tns:{variable},{role})")
            }
            CdlExpression::IsVariableAvailable { variable, role } => {
                write!(f, "cdl:isVariableAvailable(tns:{variable},{role})")
            }
        }
    }
}

/// Whole-second duration, written in the `PnDTnHnMnS` subset of ISO-8601.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct CdlDuration {
    pub seconds: u64,
}

impl CdlDuration {
    pub const fn from_secs(seconds: u64) -> Self {
        CdlDuration { seconds }
    }

    pub fn as_std(self) -> std::time::Duration {
        std::time::Duration::from_secs(self.seconds)
    }
}

impl fmt::Display for CdlDuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut rest = self.seconds;
        let days = rest / 86_400;
        rest %= 86_400;
        let hours = rest / 3_600;
        rest %= 3_600;
        let minutes = rest / 60;
        let seconds = rest % 60;

        f.write_str("P")?;
        if days > 0 {
            write!(f, "{days}D")?;
        }
        if hours == 0 && minutes == 0 && seconds == 0 {
            if days == 0 {
                f.write_str("T0S")?;
            }
            return Ok(());
        }
        f.write_str("T")?;
        if hours > 0 {
            write!(f, "{hours}H")?;
        }
        if minutes > 0 {
            write!(f, "{minutes}M")?;
        }
        if seconds > 0 {
            write!(f, "{seconds}S")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DiagnosticCode {
    EmptyName,
    DuplicateName,
    UndeclaredRole,
    SelfRelationship,
    EmptyCloneRoles,
    NoRoot,
    MultipleRoots,
    UndeclaredRelationship,
    RelationshipNotInChoreography,
    RolePairMismatch,
    NoExchange,
    NotGetVariable,
    UndeclaredVariable,
    UndeclaredInformationType,
    UndeclaredChannelType,
    UndeclaredChannelVariable,
    ExpressionRoleMismatch,
    UndeclaredChoreography,
    PerformRoot,
    PerformCycle,
    UnsupportedElement,
}

impl DiagnosticCode {
    pub fn as_str(self) -> &'static str {
        use DiagnosticCode::*;
        match self {
            EmptyName => "EMPTY_NAME",
            DuplicateName => "DUPLICATE_NAME",
            UndeclaredRole => "UNDECLARED_ROLE",
            SelfRelationship => "SELF_RELATIONSHIP",
            EmptyCloneRoles => "EMPTY_CLONE_ROLES",
            NoRoot => "NO_ROOT",
            MultipleRoots => "MULTIPLE_ROOTS",
            UndeclaredRelationship => "UNDECLARED_RELATIONSHIP",
            RelationshipNotInChoreography => "RELATIONSHIP_NOT_IN_CHOREOGRAPHY",
            RolePairMismatch => "ROLE_PAIR_MISMATCH",
            NoExchange => "NO_EXCHANGE",
            NotGetVariable => "NOT_GET_VARIABLE",
            UndeclaredVariable => "UNDECLARED_VARIABLE",
            UndeclaredInformationType => "UNDECLARED_INFORMATION_TYPE",
            UndeclaredChannelType => "UNDECLARED_CHANNEL_TYPE",
            UndeclaredChannelVariable => "UNDECLARED_CHANNEL_VARIABLE",
            ExpressionRoleMismatch => "EXPRESSION_ROLE_MISMATCH",
            UndeclaredChoreography => "UNDECLARED_CHOREOGRAPHY",
            PerformRoot => "PERFORM_ROOT",
            PerformCycle => "PERFORM_CYCLE",
            UnsupportedElement => "UNSUPPORTED_ELEMENT",
        }
    }
}

impl fmt::Display for DiagnosticCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: DiagnosticCode,
    /// Slash-separated element path, e.g. `package/choreography[x]/sequence/interaction[y]`.
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    pub fn error(code: DiagnosticCode, path: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Error,
            code,
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn warning(
        code: DiagnosticCode,
        path: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Diagnostic {
            severity: Severity::Warning,
            code,
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let level = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{level}[{}] {}: {}", self.code, self.path, self.message)
    }
}

pub fn has_errors(diagnostics: &[Diagnostic]) -> bool {
    diagnostics.iter().any(Diagnostic::is_error)
}

// ---------------------------------------------------------------------------
// Package lookups
// ---------------------------------------------------------------------------

impl ChoreographyPackage {
    pub fn role(&self, name: &str) -> Option<&RoleType> {
        self.role_types.iter().find(|r| r.name == name)
    }

    pub fn relationship(&self, name: &str) -> Option<&RelationshipType> {
        self.relationship_types.iter().find(|r| r.name == name)
    }

    pub fn choreography(&self, name: &str) -> Option<&Choreography> {
        self.choreographies.iter().find(|c| c.name == name)
    }

    pub fn root(&self) -> Option<&Choreography> {
        self.choreographies.iter().find(|c| c.root)
    }

    /// Non-root choreographies no `perform` in the package targets. They are
    /// enacted alongside the root rather than through a perform frame.
    pub fn detached_choreographies(&self) -> Vec<&Choreography> {
        let performed: HashSet<&str> = self
            .choreographies
            .iter()
            .flat_map(|c| c.body.perform_targets())
            .collect();
        self.choreographies
            .iter()
            .filter(|c| !c.root && !performed.contains(c.name.as_str()))
            .collect()
    }

    /// Every interaction in the package, per choreography, in document order.
    pub fn interactions(&self) -> Vec<(&Choreography, &Interaction)> {
        self.choreographies
            .iter()
            .flat_map(|c| c.body.interactions().into_iter().map(move |i| (c, i)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Checks every structural invariant of the package and reports all
/// violations in document order. Never stops at the first problem.
pub fn validate_package(pkg: &ChoreographyPackage) -> Vec<Diagnostic> {
    let mut v = Validator {
        pkg,
        out: Vec::new(),
        roles: pkg.role_types.iter().map(|r| r.name.as_str()).collect(),
        interaction_names: HashMap::new(),
    };
    v.run();
    v.out
}

struct Validator<'a> {
    pkg: &'a ChoreographyPackage,
    out: Vec<Diagnostic>,
    roles: HashSet<&'a str>,
    interaction_names: HashMap<&'a str, String>,
}

fn check_unique<'n, I>(names: I, category: &str, out: &mut Vec<Diagnostic>)
where
    I: IntoIterator<Item = (&'n str, String)>,
{
    let mut seen = HashSet::new();
    for (name, path) in names {
        if name.is_empty() {
            out.push(Diagnostic::error(
                DiagnosticCode::EmptyName,
                path,
                format!("{category} has an empty name"),
            ));
        } else if !seen.insert(name) {
            out.push(Diagnostic::error(
                DiagnosticCode::DuplicateName,
                path,
                format!("{category} `{name}` is declared more than once"),
            ));
        }
    }
}

impl<'a> Validator<'a> {
    fn role_declared(&mut self, role: &str, path: &str, what: &str) -> bool {
        if self.roles.contains(role) {
            return true;
        }
        self.out.push(Diagnostic::error(
            DiagnosticCode::UndeclaredRole,
            path,
            format!("{what} references undeclared role `{role}`"),
        ));
        false
    }

    fn run(&mut self) {
        let pkg = self.pkg;
        if pkg.name.is_empty() {
            self.out.push(Diagnostic::error(
                DiagnosticCode::EmptyName,
                "package",
                "package has an empty name",
            ));
        }

        check_unique(
            pkg.information_types
                .iter()
                .map(|t| (t.name.as_str(), format!("package/informationType[{}]", t.name))),
            "informationType",
            &mut self.out,
        );
        check_unique(
            pkg.role_types
                .iter()
                .map(|r| (r.name.as_str(), format!("package/roleType[{}]", r.name))),
            "roleType",
            &mut self.out,
        );

        check_unique(
            pkg.relationship_types
                .iter()
                .map(|r| (r.name.as_str(), format!("package/relationshipType[{}]", r.name))),
            "relationshipType",
            &mut self.out,
        );
        for rel in &pkg.relationship_types {
            let path = format!("package/relationshipType[{}]", rel.name);
            let a = self.role_declared(&rel.role_a, &path, "relationshipType");
            let b = self.role_declared(&rel.role_b, &path, "relationshipType");
            if a && b && rel.role_a == rel.role_b {
                self.out.push(Diagnostic::error(
                    DiagnosticCode::SelfRelationship,
                    path,
                    format!("relationship relates `{}` to itself", rel.role_a),
                ));
            }
        }

        check_unique(
            pkg.channel_types
                .iter()
                .map(|c| (c.name.as_str(), format!("package/channelType[{}]", c.name))),
            "channelType",
            &mut self.out,
        );
        for ch in &pkg.channel_types {
            let path = format!("package/channelType[{}]", ch.name);
            self.role_declared(&ch.target_role, &path, "channelType");
        }

        check_unique(
            pkg.clone_types
                .iter()
                .map(|c| (c.name.as_str(), format!("package/cloneType[{}]", c.name))),
            "cloneType",
            &mut self.out,
        );
        for clone in &pkg.clone_types {
            let path = format!("package/cloneType[{}]", clone.name);
            if clone.role_refs.is_empty() {
                self.out.push(Diagnostic::error(
                    DiagnosticCode::EmptyCloneRoles,
                    path.clone(),
                    "cloneType must name at least one roleType",
                ));
            }
            for role in &clone.role_refs {
                self.role_declared(role, &path, "cloneType");
            }
        }

        check_unique(
            pkg.choreographies
                .iter()
                .map(|c| (c.name.as_str(), format!("package/choreography[{}]", c.name))),
            "choreography",
            &mut self.out,
        );
        let roots: Vec<&Choreography> = pkg.choreographies.iter().filter(|c| c.root).collect();
        match roots.len() {
            0 => self.out.push(Diagnostic::error(
                DiagnosticCode::NoRoot,
                "package",
                "no choreography is marked root=\"true\"",
            )),
            1 => {}
            n => self.out.push(Diagnostic::error(
                DiagnosticCode::MultipleRoots,
                format!("package/choreography[{}]", roots[1].name),
                format!("{n} choreographies are marked root=\"true\""),
            )),
        }

        for chor in &pkg.choreographies {
            self.choreography(chor);
        }
        self.perform_cycles();
    }

    fn choreography(&mut self, chor: &'a Choreography) {
        let pkg = self.pkg;
        let path = format!("package/choreography[{}]", chor.name);
        for rel in &chor.relationships {
            if pkg.relationship(rel).is_none() {
                self.out.push(Diagnostic::error(
                    DiagnosticCode::UndeclaredRelationship,
                    path.clone(),
                    format!("relationship `{rel}` is not declared"),
                ));
            }
        }
        check_unique(
            chor.variables
                .iter()
                .map(|v| (v.name.as_str(), format!("{path}/variable[{}]", v.name))),
            "variable",
            &mut self.out,
        );
        for var in &chor.variables {
            let vpath = format!("{path}/variable[{}]", var.name);
            match &var.kind {
                VariableKind::Information(t) => {
                    if !pkg.information_types.iter().any(|i| &i.name == t) {
                        self.out.push(Diagnostic::error(
                            DiagnosticCode::UndeclaredInformationType,
                            vpath,
                            format!("informationType `{t}` is not declared"),
                        ));
                    }
                }
                VariableKind::Channel(t) => {
                    if !pkg.channel_types.iter().any(|c| &c.name == t) {
                        self.out.push(Diagnostic::warning(
                            DiagnosticCode::UndeclaredChannelType,
                            vpath,
                            format!("channelType `{t}` is not declared"),
                        ));
                    }
                }
            }
        }
        self.activity(chor, &chor.body, &path);
    }

    fn activity(&mut self, chor: &'a Choreography, act: &'a Activity, parent: &str) {
        match act {
            Activity::Sequence(items) => {
                let path = format!("{parent}/sequence");
                items.iter().for_each(|a| self.activity(chor, a, &path));
            }
            Activity::Parallel(items) => {
                let path = format!("{parent}/parallel");
                items.iter().for_each(|a| self.activity(chor, a, &path));
            }
            Activity::WorkUnit(w) => {
                let path = format!("{parent}/workunit[{}]", w.name);
                if let Some(guard) = &w.guard {
                    self.expression(chor, guard, &path, "guard");
                }
                self.activity(chor, &w.body, &path);
            }
            Activity::Interaction(i) => self.interaction(chor, i, parent),
            Activity::Perform(p) => {
                let path = format!("{parent}/perform[{}]", p.choreography);
                match self.pkg.choreography(&p.choreography) {
                    None => self.out.push(Diagnostic::error(
                        DiagnosticCode::UndeclaredChoreography,
                        path,
                        format!("perform targets undeclared choreography `{}`", p.choreography),
                    )),
                    Some(target) if target.root => self.out.push(Diagnostic::error(
                        DiagnosticCode::PerformRoot,
                        path,
                        format!("perform targets the root choreography `{}`", p.choreography),
                    )),
                    Some(_) => {}
                }
            }
        }
    }

    fn expression(&mut self, chor: &Choreography, expr: &CdlExpression, path: &str, what: &str) {
        if chor.variable(expr.variable()).is_none() {
            self.out.push(Diagnostic::error(
                DiagnosticCode::UndeclaredVariable,
                path,
                format!(
                    "{what} expression uses variable `{}` not defined in choreography `{}`",
                    expr.variable(),
                    chor.name
                ),
            ));
        }
        self.role_declared(expr.role(), path, &format!("{what} expression"));
    }

    fn interaction(&mut self, chor: &'a Choreography, i: &'a Interaction, parent: &str) {
        let pkg = self.pkg;
        let path = format!("{parent}/interaction[{}]", i.name);

        if i.name.is_empty() {
            self.out.push(Diagnostic::error(
                DiagnosticCode::EmptyName,
                path.clone(),
                "interaction has an empty name",
            ));
        } else if let Some(first) = self.interaction_names.get(i.name.as_str()) {
            self.out.push(Diagnostic::error(
                DiagnosticCode::DuplicateName,
                path.clone(),
                format!("interaction `{}` is already declared at {first}", i.name),
            ));
        } else {
            self.interaction_names.insert(&i.name, path.clone());
        }

        let from_ok = self.role_declared(&i.from_role, &path, "participate fromRole");
        let to_ok = self.role_declared(&i.to_role, &path, "participate toRole");

        match pkg.relationship(&i.relationship) {
            None => self.out.push(Diagnostic::error(
                DiagnosticCode::UndeclaredRelationship,
                path.clone(),
                format!("relationshipType `{}` is not declared", i.relationship),
            )),
            Some(rel) => {
                if !chor.relationships.contains(&i.relationship) {
                    self.out.push(Diagnostic::error(
                        DiagnosticCode::RelationshipNotInChoreography,
                        path.clone(),
                        format!(
                            "relationship `{}` is not listed by choreography `{}`",
                            i.relationship, chor.name
                        ),
                    ));
                }
                if from_ok && to_ok && (i.from_role == i.to_role || !rel.connects(&i.from_role, &i.to_role)) {
                    self.out.push(Diagnostic::error(
                        DiagnosticCode::RolePairMismatch,
                        path.clone(),
                        format!(
                            "roles `{}` -> `{}` are not the role pair of relationship `{}` ({}, {})",
                            i.from_role, i.to_role, rel.name, rel.role_a, rel.role_b
                        ),
                    ));
                }
            }
        }

        if let Some(cv) = &i.channel_variable {
            if chor.variable(cv).is_none() {
                self.out.push(Diagnostic::warning(
                    DiagnosticCode::UndeclaredChannelVariable,
                    path.clone(),
                    format!("channelVariable `{cv}` is not defined in choreography `{}`", chor.name),
                ));
            }
        }

        if i.exchanges.is_empty() {
            self.out.push(Diagnostic::error(
                DiagnosticCode::NoExchange,
                path.clone(),
                "interaction has no exchange",
            ));
        }
        for ex in &i.exchanges {
            let epath = format!("{path}/exchange[{}]", ex.name);
            if !pkg.information_types.iter().any(|t| t.name == ex.information_type) {
                self.out.push(Diagnostic::error(
                    DiagnosticCode::UndeclaredInformationType,
                    epath.clone(),
                    format!("informationType `{}` is not declared", ex.information_type),
                ));
            }
            let (sender, receiver) = match ex.action {
                ExchangeAction::Request => (&i.from_role, &i.to_role),
                ExchangeAction::Respond => (&i.to_role, &i.from_role),
            };
            for (expr, side, owner) in [(&ex.send, "send", sender), (&ex.receive, "receive", receiver)] {
                if !matches!(expr, CdlExpression::GetVariable { .. }) {
                    self.out.push(Diagnostic::error(
                        DiagnosticCode::NotGetVariable,
                        epath.clone(),
                        format!("{side} variable must be a cdl:getVariable expression"),
                    ));
                }
                self.expression(chor, expr, &epath, side);
                if from_ok && to_ok && self.roles.contains(expr.role()) && expr.role() != owner {
                    self.out.push(Diagnostic::warning(
                        DiagnosticCode::ExpressionRoleMismatch,
                        epath.clone(),
                        format!("{side} expression names role `{}` but `{owner}` performs it", expr.role()),
                    ));
                }
            }
        }
    }

    fn perform_cycles(&mut self) {
        let pkg = self.pkg;
        let edges: BTreeMap<&str, Vec<&str>> = pkg
            .choreographies
            .iter()
            .map(|c| (c.name.as_str(), c.body.perform_targets()))
            .collect();
        // Colour-marking DFS; report each choreography that closes a cycle once.
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Fresh,
            Open,
            Closed,
        }
        let mut marks: HashMap<&str, Mark> = edges.keys().map(|k| (*k, Mark::Fresh)).collect();
        let mut reported = HashSet::new();

        fn visit<'n>(
            node: &'n str,
            edges: &BTreeMap<&'n str, Vec<&'n str>>,
            marks: &mut HashMap<&'n str, Mark>,
            reported: &mut HashSet<&'n str>,
            out: &mut Vec<Diagnostic>,
        ) {
            marks.insert(node, Mark::Open);
            for &next in edges.get(node).map(Vec::as_slice).unwrap_or_default() {
                match marks.get(next).copied() {
                    Some(Mark::Open) => {
                        if reported.insert(next) {
                            out.push(Diagnostic::error(
                                DiagnosticCode::PerformCycle,
                                format!("package/choreography[{node}]"),
                                format!("perform of `{next}` forms a cycle"),
                            ));
                        }
                    }
                    Some(Mark::Fresh) => visit(next, edges, marks, reported, out),
                    _ => {}
                }
            }
            marks.insert(node, Mark::Closed);
        }

        for chor in &pkg.choreographies {
            if marks.get(chor.name.as_str()) == Some(&Mark::Fresh) {
                visit(&chor.name, &edges, &mut marks, &mut reported, &mut self.out);
            }
        }
    }
}
