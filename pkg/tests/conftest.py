import pytest

from evolvekit.artifacts import (
    ArtifactId,
    ArtifactKind,
    ExecutionLimits,
    KnowledgeDoc,
    Parameter,
    ToolSpec,
    ValidationCase,
)
from evolvekit.registry import Registry
from evolvekit.sandbox import Sandbox
from evolvekit.updates import AttachedCheck, CandidateUpdate, Write

ECHO_SRC = """import json, sys
args = json.load(sys.stdin)
print(json.dumps({"success": True, "result": args}))
"""

DOUBLE_SRC = """import json, sys
args = json.load(sys.stdin)
print(json.dumps({"success": True, "result": args["x"] * 2}))
"""

TRIPLE_SRC = DOUBLE_SRC.replace("* 2", "* 3")


def tool(src=ECHO_SRC, params=(("x", "int", True),), checks=()):
    return ToolSpec("test tool", tuple(Parameter(*p) for p in params), src, tuple(checks))


def doc(body="note", triggers=("alpha",), doc_type="fact"):
    return KnowledgeDoc(doc_type, "title", body, tuple(triggers))


def tid(name):
    return ArtifactId(ArtifactKind.TOOL, name)


def kid(name):
    return ArtifactId(ArtifactKind.KNOWLEDGE, name)


def vid(name):
    return ArtifactId(ArtifactKind.VALIDATION, name)


def smoke(target, fixture=None, expectation=None, kind="runtime"):
    return ValidationCase(kind, (target,), expectation or {"kind": "success_flag_true"},
                          {"x": 1} if fixture is None else fixture, ExecutionLimits())


def add_tool_candidate(name, src=ECHO_SRC, check_name=None, expectation=None, fixture=None):
    """Candidate adding one tool with one attached runtime check."""
    check_name = check_name or f"{name}_check_1"
    spec = tool(src, checks=(check_name,))
    return CandidateUpdate(
        "plan",
        (Write(0, "add", tid(name), spec),),
        (AttachedCheck(check_name, smoke(tid(name), fixture, expectation)),),
    )


@pytest.fixture(scope="session")
def sandbox():
    return Sandbox(pool_size=4)


@pytest.fixture
def registry():
    return Registry()


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
