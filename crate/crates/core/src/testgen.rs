//! Random valid packages for property tests.

use proptest::prelude::*;

use crate::model::*;

#[derive(Debug, Clone)]
enum Shape {
    Leaf { from: usize, to: usize, initiate: bool, timeout: Option<u64> },
    Perform(usize),
    Seq(Vec<Shape>),
    Par(Vec<Shape>),
    Guard { role: usize, body: Box<Shape> },
}

fn shape(allow_perform: bool) -> impl Strategy<Value = Shape> {
    let leaf = prop_oneof![
        4 => (0usize..8, 0usize..8, any::<bool>(), proptest::option::of(0u64..200_000))
            .prop_map(|(from, to, initiate, timeout)| Shape::Leaf { from, to, initiate, timeout }),
        (if allow_perform { 1 } else { 0 }) => (0usize..2).prop_map(Shape::Perform),
    ];
    leaf.prop_recursive(3, 16, 4, |inner| {
        prop_oneof![
            proptest::collection::vec(inner.clone(), 0..4).prop_map(Shape::Seq),
            proptest::collection::vec(inner.clone(), 1..4).prop_map(Shape::Par),
            (0usize..8, inner).prop_map(|(role, body)| Shape::Guard { role, body: Box::new(body) }),
        ]
    })
}

struct Builder {
    roles: usize,
    subs: usize,
    next_id: usize,
    /// Each sub-choreography is performed once at most: a repeated perform
    /// would send the same operation twice under one token, which the wire
    /// cannot tell apart from a replay.
    performed: Vec<bool>,
}

fn role(i: usize) -> String {
    format!("R{i}")
}

fn relationship(a: usize, b: usize) -> String {
    format!("rel_{}_{}", a.min(b), a.max(b))
}

impl Builder {
    fn build(&mut self, s: &Shape) -> Activity {
        match s {
            Shape::Leaf { from, to, initiate, timeout } => {
                let from = from % self.roles;
                let mut to = to % self.roles;
                if to == from {
                    to = (from + 1) % self.roles;
                }
                self.next_id += 1;
                let name = format!("i{}", self.next_id);
                Activity::Interaction(Interaction {
                    channel_variable: Some(format!("c{to}")),
                    operation: format!("op{}", self.next_id),
                    initiate: *initiate,
                    relationship: relationship(from, to),
                    from_role: role(from),
                    to_role: role(to),
                    exchanges: vec![Exchange {
                        action: ExchangeAction::Request,
                        name: name.clone(),
                        information_type: "t".into(),
                        send: CdlExpression::GetVariable { variable: "v".into(), role: role(from) },
                        receive: CdlExpression::GetVariable { variable: "v".into(), role: role(to) },
                    }],
                    timeout: timeout.map(CdlDuration::from_secs),
                    name,
                })
            }
            Shape::Perform(i) => {
                if self.subs == 0 || self.performed[i % self.subs] {
                    Activity::Sequence(vec![])
                } else {
                    self.performed[i % self.subs] = true;
                    Activity::Perform(Perform { choreography: format!("sub{}", i % self.subs) })
                }
            }
            Shape::Seq(items) => Activity::Sequence(items.iter().map(|s| self.build(s)).collect()),
            Shape::Par(items) => Activity::Parallel(items.iter().map(|s| self.build(s)).collect()),
            Shape::Guard { role: r, body } => {
                self.next_id += 1;
                Activity::WorkUnit(WorkUnit {
                    name: format!("w{}", self.next_id),
                    guard: Some(CdlExpression::IsVariableAvailable {
                        variable: "v".into(),
                        role: role(r % self.roles),
                    }),
                    body: Box::new(self.build(body)),
                })
            }
        }
    }
}

fn choreography(name: String, root: bool, roles: usize, body: Activity) -> Choreography {
    let mut relationships = Vec::new();
    for a in 0..roles {
        for b in a + 1..roles {
            relationships.push(relationship(a, b));
        }
    }
    let mut variables = vec![VariableDefinition {
        name: "v".into(),
        kind: VariableKind::Information("t".into()),
        mutable: true,
    }];
    for r in 0..roles {
        variables.push(VariableDefinition {
            name: format!("c{r}"),
            kind: VariableKind::Channel(format!("ch{r}")),
            mutable: true,
        });
    }
    Choreography { name, root, relationships, variables, body }
}

/// Strategy for packages that pass `validate_package`.
pub fn valid_package() -> impl Strategy<Value = ChoreographyPackage> {
    (
        2usize..6,
        shape(true),
        proptest::collection::vec(shape(false), 0..3),
        proptest::option::of((0usize..8, any::<bool>())),
    )
        .prop_map(|(roles, main, subs, clone)| {
            let mut b = Builder { roles, subs: subs.len(), next_id: 0, performed: vec![false; subs.len()] };
            let mut choreographies = vec![choreography("main".into(), true, roles, b.build(&main))];
            for (i, s) in subs.iter().enumerate() {
                let body = b.build(s);
                choreographies.push(choreography(format!("sub{i}"), false, roles, body));
            }
            let mut relationship_types = Vec::new();
            for a in 0..roles {
                for c in a + 1..roles {
                    relationship_types.push(RelationshipType {
                        name: relationship(a, c),
                        role_a: role(a),
                        role_b: role(c),
                    });
                }
            }
            ChoreographyPackage {
                name: "generated".into(),
                target_namespace: Some("urn:generated".into()),
                information_types: vec![InformationType { name: "t".into(), type_ref: Some("xsd:string".into()) }],
                role_types: (0..roles).map(|r| RoleType { name: role(r) }).collect(),
                relationship_types,
                channel_types: (0..roles)
                    .map(|r| ChannelType { name: format!("ch{r}"), target_role: role(r) })
                    .collect(),
                clone_types: clone
                    .into_iter()
                    .map(|(r, on_demand)| CloneType {
                        name: "spare".into(),
                        interface: None,
                        usage: if on_demand { CloneUsage::OnDemand } else { CloneUsage::Permanent },
                        role_refs: vec![role(r % roles)],
                        endpoint: None,
                    })
                    .collect(),
                choreographies,
            }
        })
}
