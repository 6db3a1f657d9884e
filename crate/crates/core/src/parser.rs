//! Reading and writing WS-CDL package documents.
//!
//! The reader accepts the element subset used by the model plus the
//! package-level `cloneType` extension. Anything else inside a package or a
//! choreography is skipped with an `UNSUPPORTED_ELEMENT` warning.

use std::fmt::Write as _;

use roxmltree::{Document, Node};
use thiserror::Error;

use crate::model::*;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{column}: {message}")]
pub struct ParseError {
    pub line: u32,
    pub column: u32,
    pub message: String,
}

impl ParseError {
    fn at(node: Node<'_, '_>, message: impl Into<String>) -> Self {
        let pos = node.document().text_pos_at(node.range().start);
        ParseError {
            line: pos.row,
            column: pos.col,
            message: message.into(),
        }
    }

    fn bare(message: impl Into<String>) -> Self {
        ParseError {
            line: 0,
            column: 0,
            message: message.into(),
        }
    }
}

/// Result of a successful parse: the package plus every diagnostic from
/// parsing (unsupported elements) and validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPackage {
    pub package: ChoreographyPackage,
    pub diagnostics: Vec<Diagnostic>,
}

impl ParsedPackage {
    pub fn has_errors(&self) -> bool {
        has_errors(&self.diagnostics)
    }

    /// The package, or the error-level diagnostics if validation failed.
    pub fn into_valid(self) -> Result<ChoreographyPackage, Vec<Diagnostic>> {
        if self.has_errors() {
            Err(self.diagnostics.into_iter().filter(Diagnostic::is_error).collect())
        } else {
            Ok(self.package)
        }
    }
}

#[derive(Debug, Error)]
pub enum PackageError {
    #[error("parse error at {0}")]
    Parse(#[from] ParseError),
    #[error("package is invalid: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
}

/// Parses and validates in one go, refusing packages with error diagnostics.
pub fn load_package(text: &str) -> Result<ChoreographyPackage, PackageError> {
    parse_package(text)?
        .into_valid()
        .map_err(PackageError::Invalid)
}

/// Parses a package document. Malformed markup or missing required
/// attributes yield a `ParseError`; semantic problems are returned as
/// diagnostics alongside the package.
pub fn parse_package(text: &str) -> Result<ParsedPackage, ParseError> {
    let doc = Document::parse(text).map_err(|e| {
        let pos = e.pos();
        ParseError {
            line: pos.row,
            column: pos.col,
            message: e.to_string(),
        }
    })?;
    let root = doc.root_element();
    if root.tag_name().name() != "package" {
        return Err(ParseError::at(
            root,
            format!("expected <package>, found <{}>", root.tag_name().name()),
        ));
    }

    let mut warnings = Vec::new();
    let mut pkg = ChoreographyPackage {
        name: attr(root, "name").unwrap_or_default().to_string(),
        target_namespace: attr(root, "targetNamespace").map(str::to_string),
        ..Default::default()
    };

    for child in root.children().filter(Node::is_element) {
        match child.tag_name().name() {
            "informationType" => pkg.information_types.push(InformationType {
                name: required(child, "name")?.to_string(),
                type_ref: attr(child, "type").map(str::to_string),
            }),
            "roleType" => pkg.role_types.push(RoleType {
                name: required(child, "name")?.to_string(),
            }),
            "relationshipType" => pkg.relationship_types.push(relationship_type(child)?),
            "channelType" => pkg.channel_types.push(channel_type(child)?),
            "cloneType" => pkg.clone_types.push(clone_type(child)?),
            "choreography" => pkg.choreographies.push(choreography(child, &mut warnings)?),
            "description" | "token" | "tokenLocator" => {}
            other => warnings.push(unsupported("package", other)),
        }
    }

    let mut diagnostics = warnings;
    diagnostics.extend(validate_package(&pkg));
    Ok(ParsedPackage {
        package: pkg,
        diagnostics,
    })
}

fn unsupported(parent: &str, element: &str) -> Diagnostic {
    Diagnostic::warning(
        DiagnosticCode::UnsupportedElement,
        format!("{parent}/{element}"),
        format!("element <{element}> is outside the supported subset and was ignored"),
    )
}

fn attr<'a>(node: Node<'a, '_>, name: &str) -> Option<&'a str> {
    node.attribute(name)
}

fn required<'a>(node: Node<'a, '_>, name: &str) -> Result<&'a str, ParseError> {
    node.attribute(name).ok_or_else(|| {
        ParseError::at(
            node,
            format!("<{}> is missing attribute `{name}`", node.tag_name().name()),
        )
    })
}

/// Strips a namespace prefix: `tns:BalizaRole` becomes `BalizaRole`.
pub fn local_name(qname: &str) -> &str {
    let trimmed = qname.trim();
    trimmed.rsplit(':').next().unwrap_or(trimmed)
}

fn parse_bool(node: Node<'_, '_>, name: &str, default: bool) -> Result<bool, ParseError> {
    match attr(node, name).map(str::trim) {
        None => Ok(default),
        Some("true") | Some("1") => Ok(true),
        Some("false") | Some("0") => Ok(false),
        Some(other) => Err(ParseError::at(
            node,
            format!("attribute `{name}` must be true or false, found `{other}`"),
        )),
    }
}

/// Role references appear as `<roleType typeRef=".."/>` (the form used by the
/// corpus) or as the standard `<role type=".."/>`.
fn role_refs(node: Node<'_, '_>) -> Vec<String> {
    node.children()
        .filter(Node::is_element)
        .filter_map(|c| match c.tag_name().name() {
            "roleType" => c.attribute("typeRef"),
            "role" => c.attribute("type"),
            _ => None,
        })
        .map(|r| local_name(r).to_string())
        .collect()
}

fn relationship_type(node: Node<'_, '_>) -> Result<RelationshipType, ParseError> {
    let name = required(node, "name")?.to_string();
    let roles = role_refs(node);
    if roles.len() != 2 {
        return Err(ParseError::at(
            node,
            format!("relationshipType `{name}` must reference exactly two roles, found {}", roles.len()),
        ));
    }
    let mut it = roles.into_iter();
    Ok(RelationshipType {
        name,
        role_a: it.next().unwrap_or_default(),
        role_b: it.next().unwrap_or_default(),
    })
}

fn channel_type(node: Node<'_, '_>) -> Result<ChannelType, ParseError> {
    let name = required(node, "name")?.to_string();
    let target_role = role_refs(node).into_iter().next().ok_or_else(|| {
        ParseError::at(node, format!("channelType `{name}` does not name a role"))
    })?;
    Ok(ChannelType { name, target_role })
}

fn clone_type(node: Node<'_, '_>) -> Result<CloneType, ParseError> {
    let usage = match attr(node, "type") {
        None => CloneUsage::Permanent,
        Some(t) => CloneUsage::parse(t.trim()).ok_or_else(|| {
            ParseError::at(node, format!("cloneType type must be on-demand or permanent, found `{t}`"))
        })?,
    };
    Ok(CloneType {
        name: required(node, "name")?.to_string(),
        interface: attr(node, "interface").map(|s| local_name(s).to_string()),
        usage,
        role_refs: role_refs(node),
        endpoint: attr(node, "endpoint").map(str::to_string),
    })
}

fn choreography(node: Node<'_, '_>, warnings: &mut Vec<Diagnostic>) -> Result<Choreography, ParseError> {
    let name = required(node, "name")?.to_string();
    let path = format!("package/choreography[{name}]");
    let mut relationships = Vec::new();
    let mut variables = Vec::new();
    let mut activities = Vec::new();

    for child in node.children().filter(Node::is_element) {
        match child.tag_name().name() {
            "relationship" => relationships.push(local_name(required(child, "type")?).to_string()),
            "variableDefinitions" => {
                for var in child.children().filter(Node::is_element) {
                    if var.tag_name().name() != "variable" {
                        warnings.push(unsupported(&path, var.tag_name().name()));
                        continue;
                    }
                    variables.push(variable(var)?);
                }
            }
            "description" => {}
            _ => {
                if let Some(act) = activity(child, &path, warnings)? {
                    activities.push(act);
                }
            }
        }
    }

    Ok(Choreography {
        name,
        root: parse_bool(node, "root", false)?,
        relationships,
        variables,
        body: body_of(activities),
    })
}

fn variable(node: Node<'_, '_>) -> Result<VariableDefinition, ParseError> {
    let name = required(node, "name")?.to_string();
    let kind = match (attr(node, "informationType"), attr(node, "channelType")) {
        (Some(t), None) => VariableKind::Information(local_name(t).to_string()),
        (None, Some(t)) => VariableKind::Channel(local_name(t).to_string()),
        _ => {
            return Err(ParseError::at(
                node,
                format!("variable `{name}` needs exactly one of informationType or channelType"),
            ))
        }
    };
    Ok(VariableDefinition {
        name,
        kind,
        mutable: parse_bool(node, "mutable", true)?,
    })
}

/// A block with exactly one activity is that activity; otherwise the
/// activities run in sequence.
fn body_of(mut activities: Vec<Activity>) -> Activity {
    if activities.len() == 1 {
        activities.pop().unwrap_or_else(Activity::empty)
    } else {
        Activity::Sequence(activities)
    }
}

fn activity(
    node: Node<'_, '_>,
    parent: &str,
    warnings: &mut Vec<Diagnostic>,
) -> Result<Option<Activity>, ParseError> {
    let tag = node.tag_name().name();
    let act = match tag {
        "sequence" | "parallel" => {
            let path = format!("{parent}/{tag}");
            let mut items = Vec::new();
            for c in node.children().filter(Node::is_element) {
                if let Some(a) = activity(c, &path, warnings)? {
                    items.push(a);
                }
            }
            if tag == "sequence" {
                Activity::Sequence(items)
            } else {
                Activity::Parallel(items)
            }
        }
        "workunit" => {
            let name = required(node, "name")?.to_string();
            let path = format!("{parent}/workunit[{name}]");
            let guard = match attr(node, "guard") {
                Some(g) => Some(parse_expression(g).map_err(|m| ParseError::at(node, m))?),
                None => None,
            };
            let mut items = Vec::new();
            for c in node.children().filter(Node::is_element) {
                if let Some(a) = activity(c, &path, warnings)? {
                    items.push(a);
                }
            }
            Activity::WorkUnit(WorkUnit {
                name,
                guard,
                body: Box::new(body_of(items)),
            })
        }
        "interaction" => Activity::Interaction(interaction(node)?),
        "perform" => Activity::Perform(Perform {
            choreography: local_name(required(node, "choreographyName")?).to_string(),
        }),
        "description" => return Ok(None),
        other => {
            warnings.push(unsupported(parent, other));
            return Ok(None);
        }
    };
    Ok(Some(act))
}

fn interaction(node: Node<'_, '_>) -> Result<Interaction, ParseError> {
    let name = required(node, "name")?.to_string();
    let mut participate = None;
    let mut exchanges = Vec::new();
    let mut timeout = None;

    for child in node.children().filter(Node::is_element) {
        match child.tag_name().name() {
            "participate" => {
                participate = Some((
                    local_name(required(child, "relationshipType")?).to_string(),
                    local_name(required(child, "fromRole")?).to_string(),
                    local_name(required(child, "toRole")?).to_string(),
                ))
            }
            "exchange" => exchanges.push(exchange(child)?),
            "timeout" => {
                let text = required(child, "time-to-complete")?;
                timeout = Some(
                    parse_duration(text).map_err(|e| ParseError::at(child, e.message))?,
                );
            }
            _ => {}
        }
    }

    let (relationship, from_role, to_role) = participate
        .ok_or_else(|| ParseError::at(node, format!("interaction `{name}` has no <participate>")))?;

    Ok(Interaction {
        channel_variable: attr(node, "channelVariable").map(|c| local_name(c).to_string()),
        operation: required(node, "operation")?.to_string(),
        initiate: parse_bool(node, "initiate", false)?,
        name,
        relationship,
        from_role,
        to_role,
        exchanges,
        timeout,
    })
}

fn exchange(node: Node<'_, '_>) -> Result<Exchange, ParseError> {
    let action = match required(node, "action")?.trim() {
        "request" => ExchangeAction::Request,
        "respond" => ExchangeAction::Respond,
        other => {
            return Err(ParseError::at(
                node,
                format!("exchange action must be request or respond, found `{other}`"),
            ))
        }
    };
    let mut send = None;
    let mut receive = None;
    for child in node.children().filter(Node::is_element) {
        let slot = match child.tag_name().name() {
            "send" => &mut send,
            "receive" => &mut receive,
            _ => continue,
        };
        let text = required(child, "variable")?;
        *slot = Some(parse_expression(text).map_err(|m| ParseError::at(child, m))?);
    }
    let name = required(node, "name")?.to_string();
    let missing = |what: &str| ParseError::at(node, format!("exchange `{name}` has no <{what}> variable"));
    Ok(Exchange {
        action,
        information_type: local_name(required(node, "informationType")?).to_string(),
        send: send.ok_or_else(|| missing("send"))?,
        receive: receive.ok_or_else(|| missing("receive"))?,
        name,
    })
}

/// Parses `cdl:getVariable(tns:X,Role)` or `cdl:isVariableAvailable(tns:X,Role)`.
/// The three-argument standard form `getVariable('tns:X','','tns:Role')` is
/// accepted as well; the middle (part) argument is ignored.
pub fn parse_expression(text: &str) -> Result<CdlExpression, String> {
    let text = text.trim();
    let open = text
        .find('(')
        .ok_or_else(|| format!("expression `{text}` has no argument list"))?;
    if !text.ends_with(')') {
        return Err(format!("expression `{text}` is not closed"));
    }
    let func = local_name(&text[..open]);
    let args: Vec<String> = text[open + 1..text.len() - 1]
        .split(',')
        .map(|a| local_name(a.trim().trim_matches(|c| c == '\'' || c == '"')).to_string())
        .collect();
    let (variable, role) = match args.as_slice() {
        [v, r] | [v, _, r] => (v.clone(), r.clone()),
        _ => return Err(format!("expression `{text}` needs two or three arguments")),
    };
    if variable.is_empty() || role.is_empty() {
        return Err(format!("expression `{text}` has an empty argument"));
    }
    match func {
        "getVariable" => Ok(CdlExpression::GetVariable { variable, role }),
        "isVariableAvailable" => Ok(CdlExpression::IsVariableAvailable { variable, role }),
        other => Err(format!("unsupported expression function `{other}`")),
    }
}

/// Parses the `PnDTnHnMnS` subset of ISO-8601 durations into whole seconds.
/// Years, months and weeks are refused because their length is ambiguous.
pub fn parse_duration(text: &str) -> Result<CdlDuration, ParseError> {
    let err = |m: &str| ParseError::bare(format!("invalid duration `{text}`: {m}"));
    let rest = text
        .strip_prefix('P')
        .ok_or_else(|| err("must start with P"))?;
    if rest.is_empty() {
        return Err(err("no components"));
    }

    let (date, time) = match rest.split_once('T') {
        Some((d, t)) => {
            if t.is_empty() {
                return Err(err("empty time part after T"));
            }
            (d, Some(t))
        }
        None => (rest, None),
    };

    let mut total: u64 = 0;
    let mut add = |part: &str, units: &[(char, u64)]| -> Result<(), ParseError> {
        let mut digits = String::new();
        let mut next_unit = 0;
        for c in part.chars() {
            if c.is_ascii_digit() {
                digits.push(c);
                continue;
            }
            if c == '-' {
                return Err(err("negative components are not allowed"));
            }
            let pos = units[next_unit..]
                .iter()
                .position(|(u, _)| *u == c)
                .ok_or_else(|| err(&format!("unexpected `{c}`")))?;
            if digits.is_empty() {
                return Err(err(&format!("`{c}` has no value")));
            }
            let value: u64 = digits.parse().map_err(|_| err("component overflow"))?;
            let mult = units[next_unit + pos].1;
            total = value
                .checked_mul(mult)
                .and_then(|v| total.checked_add(v))
                .ok_or_else(|| err("duration overflow"))?;
            digits.clear();
            next_unit += pos + 1;
        }
        if !digits.is_empty() {
            return Err(err("trailing digits without a unit"));
        }
        Ok(())
    };

    add(date, &[('D', 86_400)])?;
    if let Some(t) = time {
        add(t, &[('H', 3_600), ('M', 60), ('S', 1)])?;
    }
    Ok(CdlDuration::from_secs(total))
}

// ---------------------------------------------------------------------------
// Writer
// ---------------------------------------------------------------------------

/// Writes a package document. Output is deterministic: fixed attribute
/// order, two-space indentation, `tns:` prefixes on references.
pub fn serialize_package(pkg: &ChoreographyPackage) -> String {
    let mut w = Writer::default();
    w.line("<?xml version=\"1.0\" encoding=\"UTF-8\"?>");
    let mut open = format!("<package name=\"{}\"", esc(&pkg.name));
    if let Some(ns) = &pkg.target_namespace {
        let _ = write!(open, " targetNamespace=\"{}\"", esc(ns));
    }
    open.push_str(" xmlns=\"http://www.w3.org/2005/10/cdl\" xmlns:cdl=\"http://www.w3.org/2005/10/cdl\"");
    if let Some(ns) = &pkg.target_namespace {
        let _ = write!(open, " xmlns:tns=\"{}\"", esc(ns));
    }
    open.push('>');
    w.open(&open);

    for t in &pkg.information_types {
        match &t.type_ref {
            Some(ty) => w.line(&format!(
                "<informationType name=\"{}\" type=\"{}\"/>",
                esc(&t.name),
                esc(ty)
            )),
            None => w.line(&format!("<informationType name=\"{}\"/>", esc(&t.name))),
        }
    }
    for r in &pkg.role_types {
        w.line(&format!("<roleType name=\"{}\"/>", esc(&r.name)));
    }
    for r in &pkg.relationship_types {
        w.open(&format!("<relationshipType name=\"{}\">", esc(&r.name)));
        w.line(&format!("<roleType typeRef=\"tns:{}\"/>", esc(&r.role_a)));
        w.line(&format!("<roleType typeRef=\"tns:{}\"/>", esc(&r.role_b)));
        w.close("</relationshipType>");
    }
    for c in &pkg.channel_types {
        w.open(&format!("<channelType name=\"{}\">", esc(&c.name)));
        w.line(&format!("<roleType typeRef=\"tns:{}\"/>", esc(&c.target_role)));
        w.close("</channelType>");
    }
    for c in &pkg.clone_types {
        let mut open = format!("<cloneType name=\"{}\"", esc(&c.name));
        if let Some(i) = &c.interface {
            let _ = write!(open, " interface=\"tns:{}\"", esc(i));
        }
        let _ = write!(open, " type=\"{}\"", c.usage.as_str());
        if let Some(e) = &c.endpoint {
            let _ = write!(open, " endpoint=\"{}\"", esc(e));
        }
        open.push('>');
        w.open(&open);
        for r in &c.role_refs {
            w.line(&format!("<roleType typeRef=\"tns:{}\"/>", esc(r)));
        }
        w.close("</cloneType>");
    }
    for c in &pkg.choreographies {
        write_choreography(&mut w, c);
    }
    w.close("</package>");
    w.out
}

#[derive(Default)]
struct Writer {
    out: String,
    depth: usize,
}

impl Writer {
    fn line(&mut self, s: &str) {
        for _ in 0..self.depth {
            self.out.push_str("  ");
        }
        self.out.push_str(s);
        self.out.push('\n');
    }

    fn open(&mut self, s: &str) {
        self.line(s);
        self.depth += 1;
    }

    fn close(&mut self, s: &str) {
        self.depth = self.depth.saturating_sub(1);
        self.line(s);
    }
}

fn esc(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

fn write_choreography(w: &mut Writer, c: &Choreography) {
    w.open(&format!(
        "<choreography name=\"{}\" root=\"{}\">",
        esc(&c.name),
        c.root
    ));
    for r in &c.relationships {
        w.line(&format!("<relationship type=\"tns:{}\"/>", esc(r)));
    }
    if !c.variables.is_empty() {
        w.open("<variableDefinitions>");
        for v in &c.variables {
            let (attr, ty) = match &v.kind {
                VariableKind::Information(t) => ("informationType", t),
                VariableKind::Channel(t) => ("channelType", t),
            };
            let mutable = if v.mutable { "" } else { " mutable=\"false\"" };
            w.line(&format!(
                "<variable name=\"{}\" {attr}=\"tns:{}\"{mutable}/>",
                esc(&v.name),
                esc(ty)
            ));
        }
        w.close("</variableDefinitions>");
    }
    write_activity(w, &c.body);
    w.close("</choreography>");
}

fn write_activity(w: &mut Writer, act: &Activity) {
    match act {
        Activity::Sequence(items) | Activity::Parallel(items) => {
            let tag = if matches!(act, Activity::Sequence(_)) { "sequence" } else { "parallel" };
            if items.is_empty() {
                w.line(&format!("<{tag}/>"));
                return;
            }
            w.open(&format!("<{tag}>"));
            items.iter().for_each(|a| write_activity(w, a));
            w.close(&format!("</{tag}>"));
        }
        Activity::WorkUnit(wu) => {
            let mut open = format!("<workunit name=\"{}\"", esc(&wu.name));
            if let Some(g) = &wu.guard {
                let _ = write!(open, " guard=\"{}\"", esc(&g.to_string()));
            }
            open.push('>');
            w.open(&open);
            write_activity(w, &wu.body);
            w.close("</workunit>");
        }
        Activity::Perform(p) => {
            w.line(&format!("<perform choreographyName=\"tns:{}\"/>", esc(&p.choreography)))
        }
        Activity::Interaction(i) => write_interaction(w, i),
    }
}

fn write_interaction(w: &mut Writer, i: &Interaction) {
    let mut open = format!("<interaction name=\"{}\"", esc(&i.name));
    if let Some(cv) = &i.channel_variable {
        let _ = write!(open, " channelVariable=\"tns:{}\"", esc(cv));
    }
    let _ = write!(open, " operation=\"{}\"", esc(&i.operation));
    if i.initiate {
        open.push_str(" initiate=\"true\"");
    }
    open.push('>');
    w.open(&open);
    w.line(&format!(
        "<participate relationshipType=\"tns:{}\" fromRole=\"tns:{}\" toRole=\"tns:{}\"/>",
        esc(&i.relationship),
        esc(&i.from_role),
        esc(&i.to_role)
    ));
    for ex in &i.exchanges {
        w.open(&format!(
            "<exchange action=\"{}\" name=\"{}\" informationType=\"tns:{}\">",
            ex.action.as_str(),
            esc(&ex.name),
            esc(&ex.information_type)
        ));
        w.line(&format!("<send variable=\"{}\"/>", esc(&ex.send.to_string())));
        w.line(&format!("<receive variable=\"{}\"/>", esc(&ex.receive.to_string())));
        w.close("</exchange>");
    }
    if let Some(t) = i.timeout {
        w.line(&format!("<timeout time-to-complete=\"{t}\"/>"));
    }
    w.close("</interaction>");
}
