#!/usr/bin/env python3
"""
First-order queries over the knowledge graph
Query graphs in disjunctive normal form, the textual query DSL, structural
validation, exact traversal answering and the fourteen benchmark structures.

DSL:
    ?T : exists V1, V2 . p(a, V1) & q(V1, V2) & !r(b, V2) ...
    ?T : p(a, T) | (q(b, V) & r(V, T))      branches joined with '|'
Names made of letters, digits and _ / - ~ ^ + * @ # $ % < > = ' are written
bare; anything else is double-quoted with backslash escapes. A bare name that
matches a declared variable is that variable; quoted names are always entities.
"""

import logging
import re
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, NamedTuple, Optional, Sequence, Set, Tuple, Union

import networkx as nx

from errors import ConfigError, QueryParseError, QueryValidationError
from knowledge_graph import KnowledgeGraph, Scope

logger = logging.getLogger(__name__)


# ============================================================================
# QUERY TYPES
# ============================================================================

@dataclass(frozen=True, order=True)
class Anchor:
    entity: int


@dataclass(frozen=True, order=True)
class Var:
    index: int


Term = Union[Anchor, Var]


@dataclass(frozen=True)
class Atom:
    """A possibly negated triple pattern predicate(arg1, arg2)"""
    predicate: int
    arg1: Term
    arg2: Term
    negated: bool = False


@dataclass(frozen=True)
class QueryGraph:
    """Disjunction of conjunctive branches sharing the target Var(0)"""
    disjuncts: Tuple[Tuple[Atom, ...], ...]
    num_vars: int
    var_names: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.var_names:
            names = ("T",) + tuple(f"V{i}" for i in range(1, self.num_vars))
            object.__setattr__(self, "var_names", names)

    @property
    def target(self) -> Var:
        return Var(0)

    @property
    def atoms(self) -> List[Atom]:
        return [atom for disjunct in self.disjuncts for atom in disjunct]

    @property
    def existential_count(self) -> int:
        return self.num_vars - 1

    def name_of(self, var: Var) -> str:
        return self.var_names[var.index]


QUERY_TYPES = ("1p", "2p", "3p", "2i", "3i", "pi", "ip", "2u", "up", "2in", "3in", "inp", "pin", "pni")
EPFO_TYPES = QUERY_TYPES[:9]
NEGATION_TYPES = QUERY_TYPES[9:]
TRAINING_TYPES = ("2i", "3i", "2in", "3in")


class TemplateAtom(NamedTuple):
    relation: int           # relation slot
    subject: Union[str, int]  # "a<k>" anchor slot or variable index
    object: int             # variable index, 0 is the target
    negated: bool = False


TEMPLATES: Dict[str, Tuple[int, Tuple[Tuple[TemplateAtom, ...], ...]]] = {
    "1p": (1, ((TemplateAtom(0, "a0", 0),),)),
    "2p": (2, ((TemplateAtom(0, "a0", 1), TemplateAtom(1, 1, 0)),)),
    "3p": (3, ((TemplateAtom(0, "a0", 1), TemplateAtom(1, 1, 2), TemplateAtom(2, 2, 0)),)),
    "2i": (1, ((TemplateAtom(0, "a0", 0), TemplateAtom(1, "a1", 0)),)),
    "3i": (1, ((TemplateAtom(0, "a0", 0), TemplateAtom(1, "a1", 0), TemplateAtom(2, "a2", 0)),)),
    "pi": (2, ((TemplateAtom(0, "a0", 1), TemplateAtom(1, 1, 0), TemplateAtom(2, "a1", 0)),)),
    "ip": (2, ((TemplateAtom(0, "a0", 1), TemplateAtom(1, "a1", 1), TemplateAtom(2, 1, 0)),)),
    "2u": (1, ((TemplateAtom(0, "a0", 0),), (TemplateAtom(1, "a1", 0),))),
    "up": (2, ((TemplateAtom(0, "a0", 1), TemplateAtom(2, 1, 0)),
               (TemplateAtom(1, "a1", 1), TemplateAtom(2, 1, 0)))),
    "2in": (1, ((TemplateAtom(0, "a0", 0), TemplateAtom(1, "a1", 0, True)),)),
    "3in": (1, ((TemplateAtom(0, "a0", 0), TemplateAtom(1, "a1", 0), TemplateAtom(2, "a2", 0, True)),)),
    "inp": (2, ((TemplateAtom(0, "a0", 1), TemplateAtom(1, "a1", 1, True), TemplateAtom(2, 1, 0)),)),
    "pin": (2, ((TemplateAtom(0, "a0", 1), TemplateAtom(1, 1, 0), TemplateAtom(2, "a1", 0, True)),)),
    "pni": (2, ((TemplateAtom(0, "a0", 1), TemplateAtom(1, 1, 0, True), TemplateAtom(2, "a1", 0)),)),
}


def query_template(query_type: str) -> Tuple[int, Tuple[Tuple[TemplateAtom, ...], ...]]:
    if query_type not in TEMPLATES:
        raise ConfigError(f"Unknown query type '{query_type}' (expected one of {', '.join(QUERY_TYPES)})")
    return TEMPLATES[query_type]


def template_slots(query_type: str) -> Tuple[int, int]:
    """Number of (anchor, relation) slots of a structure"""
    _, disjuncts = query_template(query_type)
    anchors = {t.subject for d in disjuncts for t in d if isinstance(t.subject, str)}
    relations = {t.relation for d in disjuncts for t in d}
    return len(anchors), len(relations)


def instantiate_template(query_type: str, anchors: Sequence[int], relations: Sequence[int]) -> QueryGraph:
    num_vars, disjuncts = query_template(query_type)

    def term(slot) -> Term:
        if isinstance(slot, str):
            return Anchor(int(anchors[int(slot[1:])]))
        return Var(slot)

    built = tuple(
        tuple(Atom(int(relations[t.relation]), term(t.subject), Var(t.object), t.negated) for t in disjunct)
        for disjunct in disjuncts
    )
    return QueryGraph(built, num_vars)


def _skeleton(disjuncts) -> Tuple:
    """Structure of a query with anchors and relations abstracted away"""
    renumber = {0: 0}
    shape = []
    for disjunct in disjuncts:
        branch = []
        for atom in disjunct:
            ends = []
            for arg in (atom.arg1, atom.arg2):
                if isinstance(arg, Anchor):
                    ends.append("a")
                else:
                    renumber.setdefault(arg.index, len(renumber))
                    ends.append(renumber[arg.index])
            branch.append((ends[0], ends[1], atom.negated))
        shape.append(tuple(branch))
    return tuple(shape)


_TEMPLATE_SKELETONS = {
    _skeleton(instantiate_template(name, [0, 1, 2], [0, 1, 2]).disjuncts): name for name in QUERY_TYPES
}


def infer_query_type(graph: QueryGraph) -> str:
    """Benchmark structure name, or 'custom' for anything else"""
    return _TEMPLATE_SKELETONS.get(_skeleton(graph.disjuncts), "custom")


# ============================================================================
# DSL
# ============================================================================

BARE_NAME = r"[A-Za-z0-9_/\-~^+*@#$%<>=']+"
_BARE_RE = re.compile(BARE_NAME + r"\Z")
_TOKEN_RE = re.compile(
    r"\s*(?:(?P<string>\"(?:[^\"\\]|\\.)*\")|(?P<name>" + BARE_NAME + r")|(?P<punct>[?:.,()&|!]))"
)


class _Token(NamedTuple):
    kind: str   # "name", "string", "punct" or "end"
    text: str
    position: int


def _tokenize(text: str) -> List[_Token]:
    tokens = []
    position = 0
    while True:
        while position < len(text) and text[position].isspace():
            position += 1
        if position >= len(text):
            break
        match = _TOKEN_RE.match(text, position)
        if not match or match.end() == position:
            raise QueryParseError(f"Unexpected character {text[position]!r}", position)
        kind = match.lastgroup
        value = match.group(kind)
        if kind == "string":
            value = re.sub(r"\\(.)", r"\1", value[1:-1])
        tokens.append(_Token(kind, value, match.start(kind)))
        position = match.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


class _Parser:
    """Recursive-descent parser producing a QueryGraph"""

    def __init__(self, text: str, kg: KnowledgeGraph):
        self.tokens = _tokenize(text)
        self.index = 0
        self.kg = kg
        self.var_names: List[str] = []

    def peek(self) -> _Token:
        return self.tokens[self.index]

    def advance(self) -> _Token:
        token = self.tokens[self.index]
        self.index += 1
        return token

    def expect(self, text: str) -> _Token:
        token = self.advance()
        if token.kind != "punct" or token.text != text:
            found = token.text or "end of input"
            raise QueryParseError(f"Expected '{text}', found '{found}'", token.position)
        return token

    def at(self, text: str) -> bool:
        token = self.peek()
        return token.kind == "punct" and token.text == text

    def name(self, what: str) -> _Token:
        token = self.advance()
        if token.kind not in ("name", "string"):
            found = token.text or "end of input"
            raise QueryParseError(f"Expected {what}, found '{found}'", token.position)
        return token

    def declare(self, token: _Token) -> None:
        if token.kind != "name":
            raise QueryParseError("Variable names cannot be quoted", token.position)
        if token.text in self.var_names:
            raise QueryParseError(f"Variable '{token.text}' declared twice", token.position)
        self.var_names.append(token.text)

    def parse(self) -> QueryGraph:
        self.expect("?")
        self.declare(self.name("target variable"))
        self.expect(":")
        head = self.peek()
        if head.kind == "name" and head.text == "exists":
            self.advance()
            self.declare(self.name("existential variable"))
            while self.at(","):
                self.advance()
                self.declare(self.name("existential variable"))
            self.expect(".")

        disjuncts = [self.branch()]
        while self.at("|"):
            self.advance()
            disjuncts.append(self.branch())
        token = self.peek()
        if token.kind != "end":
            raise QueryParseError(f"Unexpected '{token.text}' after query body", token.position)
        return QueryGraph(tuple(disjuncts), len(self.var_names), tuple(self.var_names))

    def branch(self) -> Tuple[Atom, ...]:
        if self.at("("):
            self.advance()
            atoms = self.conjunction()
            self.expect(")")
            return atoms
        return self.conjunction()

    def conjunction(self) -> Tuple[Atom, ...]:
        atoms = [self.literal()]
        while self.at("&"):
            self.advance()
            atoms.append(self.literal())
        return tuple(atoms)

    def literal(self) -> Atom:
        negated = False
        if self.at("!"):
            self.advance()
            negated = True
        token = self.name("relation name")
        if token.text not in self.kg.relations:
            raise QueryParseError(f"Unknown relation '{token.text}'", token.position)
        predicate = self.kg.relations.id_of(token.text)
        self.expect("(")
        arg1 = self.term()
        self.expect(",")
        arg2 = self.term()
        self.expect(")")
        return Atom(predicate, arg1, arg2, negated)

    def term(self) -> Term:
        token = self.name("entity or variable")
        if token.kind == "name" and token.text in self.var_names:
            return Var(self.var_names.index(token.text))
        if token.text in self.kg.entities:
            return Anchor(self.kg.entities.id_of(token.text))
        raise QueryParseError(f"Unknown entity or undeclared variable '{token.text}'", token.position)


def parse_query(text: str, kg: KnowledgeGraph, validate: bool = True) -> QueryGraph:
    """Parse DSL text against the graph's vocabularies

    Raises:
        QueryParseError: text outside the grammar or unknown names
        QueryValidationError: structure rejected by validate_query
    """
    graph = _Parser(text, kg).parse()
    if validate:
        violations = validate_query(graph)
        if violations:
            raise QueryValidationError(violations)
    return graph


def _quote(name: str, reserved: Sequence[str] = ()) -> str:
    if _BARE_RE.match(name) and name not in reserved:
        return name
    escaped = name.replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def format_atom(atom: Atom, graph: QueryGraph, kg: Optional[KnowledgeGraph] = None) -> str:
    reserved = tuple(graph.var_names) + ("exists",)

    def show(arg: Term) -> str:
        if isinstance(arg, Var):
            return graph.name_of(arg)
        if kg is None:
            return f"#{arg.entity}"
        return _quote(kg.entities.name_of(arg.entity), reserved)

    relation = _quote(kg.relations.name_of(atom.predicate), ("exists",)) if kg is not None else f"#{atom.predicate}"
    prefix = "!" if atom.negated else ""
    return f"{prefix}{relation}({show(atom.arg1)}, {show(atom.arg2)})"


def serialize_query(graph: QueryGraph, kg: KnowledgeGraph) -> str:
    """Canonical DSL text; parse_query(serialize_query(g)) == g"""
    head = f"?{graph.var_names[0]} : "
    if graph.num_vars > 1:
        head += "exists " + ", ".join(graph.var_names[1:]) + " . "
    branches = []
    for disjunct in graph.disjuncts:
        body = " & ".join(format_atom(atom, graph, kg) for atom in disjunct)
        if len(graph.disjuncts) > 1 and len(disjunct) > 1:
            body = f"({body})"
        branches.append(body)
    return head + " | ".join(branches)


# ============================================================================
# VALIDATION
# ============================================================================

def _node(term: Term) -> str:
    return f"a{term.entity}" if isinstance(term, Anchor) else f"v{term.index}"


def validate_query(graph: QueryGraph) -> List[str]:
    """Structural checks; returns one message per violation, empty when valid"""
    violations: List[str] = []
    used: Set[int] = set()

    def show(atom: Atom) -> str:
        return format_atom(atom, graph)

    if not graph.disjuncts or any(not disjunct for disjunct in graph.disjuncts):
        return ["query has an empty branch"]

    for number, disjunct in enumerate(graph.disjuncts):
        where = f" in branch {number + 1}" if len(graph.disjuncts) > 1 else ""
        dag = nx.DiGraph()
        variables: Set[int] = set()
        broken = False
        for atom in disjunct:
            for arg in (atom.arg1, atom.arg2):
                if isinstance(arg, Var):
                    if not 0 <= arg.index < graph.num_vars:
                        violations.append(f"undeclared variable index {arg.index} in {show(atom)}")
                        broken = True
                        continue
                    variables.add(arg.index)
                    dag.add_node(_node(arg))
            if isinstance(atom.arg2, Anchor):
                violations.append(f"anchor used as object{where}, anchors must be sources: {show(atom)}")
            if isinstance(atom.arg1, Var) and atom.arg1 == atom.arg2:
                violations.append(f"atom relates a variable to itself: {show(atom)}")
            dag.add_edge(_node(atom.arg1), _node(atom.arg2))
        if broken:
            continue
        used |= variables

        if 0 not in variables:
            violations.append(f"target {graph.var_names[0]} does not occur{where}")
        if not nx.is_directed_acyclic_graph(dag):
            cycle = " -> ".join(u for u, _ in nx.find_cycle(dag))
            violations.append(f"dependency graph is not acyclic{where} (cycle {cycle})")
            continue

        sinks = sorted(v for v in variables if dag.out_degree(_node(Var(v))) == 0)
        if sinks != [0] and 0 in variables:
            names = ", ".join(graph.var_names[v] for v in sinks) or "none"
            violations.append(f"target must be the unique sink{where}, sinks: {names}")

        for v in sorted(variables):
            inbound = [atom for atom in disjunct if atom.arg2 == Var(v)]
            positive = [atom for atom in inbound if not atom.negated]
            name = graph.var_names[v]
            if not inbound:
                violations.append(f"variable {name} has no inbound atom{where}")
            elif not positive:
                violations.append(f"negated atom is the sole support of {name}: {show(inbound[0])}")
            elif not any(node.startswith("a") for node in nx.ancestors(dag, _node(Var(v)))):
                violations.append(f"variable {name} is not reachable from an anchor{where}")

    for v in range(1, graph.num_vars):
        if v not in used:
            violations.append(f"unused variable {graph.var_names[v]}")
    return violations


def variable_order(disjunct: Sequence[Atom]) -> List[int]:
    """Variables of a branch in topological order, smallest index first among ready ones"""
    dag = nx.DiGraph()
    for atom in disjunct:
        for arg in (atom.arg1, atom.arg2):
            if isinstance(arg, Var):
                dag.add_node(arg.index)
        if isinstance(atom.arg1, Var) and isinstance(atom.arg2, Var):
            dag.add_edge(atom.arg1.index, atom.arg2.index)
    return list(nx.lexicographical_topological_sort(dag))


def inbound_atoms(disjunct: Sequence[Atom], var: int) -> List[Atom]:
    return [atom for atom in disjunct if atom.arg2 == Var(var)]


class PlanStep(NamedTuple):
    """One variable to resolve and its inbound atoms in combination order"""
    var: int
    atoms: Tuple[Atom, ...]

    @property
    def generator(self) -> Atom:
        return self.atoms[0]


def plan_disjunct(disjunct: Sequence[Atom], kg: Optional[KnowledgeGraph] = None) -> List[PlanStep]:
    """Resolution order of a branch

    Variables come in topological order. For each, the generator is the
    anchored positive atom with the fewest training-graph neighbours (atoms
    with a variable subject come after anchored ones), followed by the other
    positive atoms and then the negated atoms, each in query order.
    """
    steps = []
    for var in variable_order(disjunct):
        inbound = inbound_atoms(disjunct, var)
        positive = [atom for atom in inbound if not atom.negated]
        negated = [atom for atom in inbound if atom.negated]

        def cost(item):
            position, atom = item
            if isinstance(atom.arg1, Anchor):
                degree = kg.degree(atom.arg1.entity, atom.predicate, Scope.TRAIN_ONLY) if kg is not None else 0
                return (0, degree, position)
            return (1, 0, position)

        chosen, generator = min(enumerate(positive), key=cost)
        rest = [atom for position, atom in enumerate(positive) if position != chosen]
        steps.append(PlanStep(var, tuple([generator] + rest + negated)))
    return steps


# ============================================================================
# TRAVERSAL
# ============================================================================

def _is_in_tree(disjunct: Sequence[Atom]) -> bool:
    outgoing: Dict[int, int] = {}
    for atom in disjunct:
        if isinstance(atom.arg1, Var):
            outgoing[atom.arg1.index] = outgoing.get(atom.arg1.index, 0) + 1
    return all(count == 1 for var, count in outgoing.items() if var != 0)


def _objects(kg: KnowledgeGraph, subject: int, predicate: int, scope: Scope) -> Set[int]:
    return set(kg.objects(subject, predicate, scope).tolist())


def _sweep(kg: KnowledgeGraph, disjunct: Sequence[Atom], scope: Scope) -> Set[int]:
    """Per-variable candidate sets; exact when every variable feeds one atom"""
    bindings: Dict[int, Set[int]] = {}
    for var in variable_order(disjunct):
        candidates: Optional[Set[int]] = None
        excluded: List[Tuple[Set[int], int]] = []
        for atom in inbound_atoms(disjunct, var):
            subjects = {atom.arg1.entity} if isinstance(atom.arg1, Anchor) else bindings[atom.arg1.index]
            if atom.negated:
                excluded.append((subjects, atom.predicate))
                continue
            reached: Set[int] = set()
            for subject in subjects:
                reached |= _objects(kg, subject, atom.predicate, scope)
            candidates = reached if candidates is None else candidates & reached
        candidates = candidates or set()
        for subjects, predicate in excluded:
            if not subjects:
                candidates = set()
                break
            # x survives if some binding of the subject lacks the edge
            always = None
            for subject in subjects:
                reached = _objects(kg, subject, predicate, scope)
                always = reached if always is None else always & reached
            candidates -= always
        bindings[var] = candidates
    return bindings.get(0, set())


def _backtrack(kg: KnowledgeGraph, disjunct: Sequence[Atom], scope: Scope) -> Set[int]:
    """Exact answers for arbitrary DAG branches by binding one variable at a time"""
    order = variable_order(disjunct)
    answers: Set[int] = set()

    def candidates(var: int, bound: Dict[int, int]) -> Set[int]:
        result: Optional[Set[int]] = None
        removed: Set[int] = set()
        for atom in inbound_atoms(disjunct, var):
            subject = atom.arg1.entity if isinstance(atom.arg1, Anchor) else bound[atom.arg1.index]
            reached = _objects(kg, subject, atom.predicate, scope)
            if atom.negated:
                removed |= reached
            else:
                result = reached if result is None else result & reached
        return (result or set()) - removed

    def bind(position: int, bound: Dict[int, int]) -> None:
        var = order[position]
        pool = candidates(var, bound)
        if var == 0:
            answers.update(pool)
            return
        for entity in sorted(pool):
            bound[var] = entity
            bind(position + 1, bound)
        bound.pop(var, None)

    bind(0, {})
    return answers


def traverse_answers(kg: KnowledgeGraph, graph: QueryGraph, scope: Scope) -> FrozenSet[int]:
    """Exact answer set of a validated query by relational traversal"""
    answers: Set[int] = set()
    for disjunct in graph.disjuncts:
        if _is_in_tree(disjunct):
            answers |= _sweep(kg, disjunct, scope)
        else:
            answers |= _backtrack(kg, disjunct, scope)
    return frozenset(answers)
