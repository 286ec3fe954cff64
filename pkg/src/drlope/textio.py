"""Plain-text matrix format for MDPs, policy pairs, and fitted nuisances.

Grammar (one item per line, ``#`` starts a comment line)::

    drlope-matrix 1              # magic + format version, first line
    kind <mdp|policies|nuisance>
    <key> <value>                # scalar header fields
    matrix <name> <rows> <cols>  # followed by exactly <rows> lines of <cols> floats
    end

An MDP file carries ``n_states``, ``n_actions``, ``gamma``, ``r_max`` and
``reward_noise`` headers and the matrices ``transition`` (S*A rows of S,
row-major over (s, a)), ``reward_mean`` and ``reward_var`` (S rows of A).
A policies file carries ``n_states``/``n_actions`` and the matrices
``target_action_probs``, ``target_initial_dist`` (1 row), ``behavior_action_probs``
and ``behavior_initial_dist``. A nuisance file carries a ``provenance`` header
and a ``w`` (1 row of S) and/or ``q`` (S rows of A) matrix.

Floats are written with ``repr``, which round-trips every double exactly.
"""

import os
import tempfile

import numpy as np

from .errors import ParseError
from .mdp import Policy, TabularMdp

MAGIC = "drlope-matrix"
VERSION = "1"


def format_document(kind, headers, matrices):
    lines = [f"{MAGIC} {VERSION}", f"kind {kind}"]
    for key, value in headers.items():
        lines.append(f"{key} {value!r}" if isinstance(value, float) else f"{key} {value}")
    for name, mat in matrices.items():
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        lines.append(f"matrix {name} {mat.shape[0]} {mat.shape[1]}")
        for row in mat:
            lines.append(" ".join(repr(float(x)) for x in row))
    lines.append("end")
    return "\n".join(lines) + "\n"


class _Headers(dict):
    """Header values plus the (line, column) each value came from."""

    def __init__(self):
        super().__init__()
        self.where = {}


def parse_document(text):
    """Parse a document into ``(kind, headers, matrices)``; raises ParseError with position."""
    raw = text.splitlines()
    rows = [(i + 1, line) for i, line in enumerate(raw)
            if line.strip() and not line.lstrip().startswith("#")]
    if not rows:
        raise ParseError("empty document", line=1, column=1)
    lineno, first = rows[0]
    if first.split()[:1] != [MAGIC]:
        raise ParseError(f"expected '{MAGIC} <version>' header", line=lineno, column=1)
    parts = first.split()
    if len(parts) != 2 or parts[1] != VERSION:
        raise ParseError(f"unsupported format version {parts[1:]}", line=lineno,
                         column=len(MAGIC) + 2)
    kind = None
    headers = _Headers()
    matrices = {}
    i = 1
    ended = False
    while i < len(rows):
        lineno, line = rows[i]
        tokens = line.split()
        key = tokens[0]
        if key == "end":
            ended = True
            if i != len(rows) - 1:
                raise ParseError("content after 'end'", line=rows[i + 1][0], column=1)
            break
        if key == "matrix":
            if len(tokens) != 4:
                raise ParseError("expected 'matrix <name> <rows> <cols>'", line=lineno, column=1)
            name = tokens[1]
            try:
                nr, nc = int(tokens[2]), int(tokens[3])
            except ValueError:
                raise ParseError("matrix dimensions must be integers", line=lineno,
                                 column=line.index(tokens[2]) + 1) from None
            if nr < 0 or nc < 0:
                raise ParseError("matrix dimensions must be nonnegative", line=lineno, column=1)
            data = np.empty((nr, nc))
            for r in range(nr):
                i += 1
                if i >= len(rows):
                    raise ParseError(f"matrix {name} truncated: expected {nr} rows",
                                     line=len(raw) + 1, column=1)
                rl, rline = rows[i]
                vals = rline.split()
                if len(vals) != nc:
                    raise ParseError(f"matrix {name} row has {len(vals)} values, expected {nc}",
                                     line=rl, column=1)
                col = 0
                for c, tok in enumerate(vals):
                    col = rline.index(tok, col)
                    try:
                        data[r, c] = float(tok)
                    except ValueError:
                        raise ParseError(f"not a number: {tok!r}", line=rl,
                                         column=col + 1) from None
                    col += len(tok)
            matrices[name] = data
        elif key == "kind":
            if len(tokens) != 2:
                raise ParseError("expected 'kind <name>'", line=lineno, column=1)
            kind = tokens[1]
        else:
            if len(tokens) != 2:
                raise ParseError(f"header {key!r} needs exactly one value", line=lineno, column=1)
            headers[key] = tokens[1]
            headers.where[key] = (lineno, line.index(tokens[1], line.index(key) + len(key)) + 1)
        i += 1
    if not ended:
        raise ParseError("missing 'end'", line=len(raw) + 1, column=1)
    if kind is None:
        raise ParseError("missing 'kind' line", line=rows[0][0], column=1)
    return kind, headers, matrices


def _require(headers, matrices, keys, mats, kind):
    for k in keys:
        if k not in headers:
            raise ParseError(f"{kind} document missing header {k!r}")
    for m in mats:
        if m not in matrices:
            raise ParseError(f"{kind} document missing matrix {m!r}")


def _convert(headers, key, cast, what):
    try:
        return cast(headers[key])
    except ValueError:
        line, column = getattr(headers, "where", {}).get(key, (None, None))
        raise ParseError(f"header {key!r} must be {what}, got {headers[key]!r}",
                         line=line, column=column) from None


def _int(headers, key):
    return _convert(headers, key, int, "an integer")


def _float(headers, key):
    return _convert(headers, key, float, "a number")


def _shaped(matrices, name, shape):
    m = matrices[name]
    if m.size != int(np.prod(shape)):
        raise ParseError(f"matrix {name!r} has {m.size} entries, expected shape {shape}")
    return m.reshape(shape)


def dumps_mdp(mdp):
    S, A = mdp.n_states, mdp.n_actions
    headers = {"n_states": S, "n_actions": A, "gamma": mdp.gamma, "r_max": mdp.r_max,
               "reward_noise": mdp.reward_noise}
    mats = {"transition": mdp.transition.reshape(S * A, S),
            "reward_mean": mdp.reward_mean, "reward_var": mdp.reward_var}
    return format_document("mdp", headers, mats)


def loads_mdp(text):
    kind, h, m = parse_document(text)
    if kind != "mdp":
        raise ParseError(f"expected kind 'mdp', got {kind!r}")
    _require(h, m, ["n_states", "n_actions", "gamma", "r_max"],
             ["transition", "reward_mean", "reward_var"], "mdp")
    S, A = _int(h, "n_states"), _int(h, "n_actions")
    try:
        return TabularMdp(
            transition=_shaped(m, "transition", (S, A, S)),
            reward_mean=_shaped(m, "reward_mean", (S, A)),
            reward_var=_shaped(m, "reward_var", (S, A)),
            gamma=_float(h, "gamma"),
            r_max=_float(h, "r_max"),
            reward_noise=h.get("reward_noise", "gaussian"),
        )
    except ParseError:
        raise
    except ValueError as exc:
        raise ParseError(f"invalid mdp: {exc}") from exc


def dumps_policies(pi_e, pi_b):
    headers = {"n_states": pi_e.n_states, "n_actions": pi_e.n_actions}
    mats = {"target_action_probs": pi_e.action_probs,
            "target_initial_dist": pi_e.initial_dist[None, :],
            "behavior_action_probs": pi_b.action_probs,
            "behavior_initial_dist": pi_b.initial_dist[None, :]}
    return format_document("policies", headers, mats)


def loads_policies(text):
    kind, h, m = parse_document(text)
    if kind != "policies":
        raise ParseError(f"expected kind 'policies', got {kind!r}")
    names = ["target_action_probs", "target_initial_dist",
             "behavior_action_probs", "behavior_initial_dist"]
    _require(h, m, ["n_states", "n_actions"], names, "policies")
    S, A = _int(h, "n_states"), _int(h, "n_actions")
    try:
        pi_e = Policy(_shaped(m, names[0], (S, A)), _shaped(m, names[1], (S,)))
        pi_b = Policy(_shaped(m, names[2], (S, A)), _shaped(m, names[3], (S,)))
    except ParseError:
        raise
    except ValueError as exc:
        raise ParseError(f"invalid policy: {exc}") from exc
    return pi_e, pi_b


def dumps_nuisance(provenance, w=None, q=None, fold_id=None):
    headers = {"provenance": provenance}
    if fold_id is not None:
        headers["fold_id"] = int(fold_id)
    mats = {}
    if w is not None:
        mats["w"] = np.asarray(w, dtype=float)[None, :]
    if q is not None:
        mats["q"] = np.asarray(q, dtype=float)
    return format_document("nuisance", headers, mats)


def loads_nuisance(text):
    """Returns ``(provenance, w, q, fold_id)``; absent parts are None."""
    kind, h, m = parse_document(text)
    if kind != "nuisance":
        raise ParseError(f"expected kind 'nuisance', got {kind!r}")
    _require(h, m, ["provenance"], [], "nuisance")
    w = m["w"].reshape(-1) if "w" in m else None
    fold = _int(h, "fold_id") if "fold_id" in h else None
    return h["provenance"], w, m.get("q"), fold


def write_atomic(path, text):
    """Write text via a temp file in the same directory and an atomic rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_mdp(path, mdp):
    write_atomic(path, dumps_mdp(mdp))


def load_mdp(path):
    with open(path) as fh:
        return loads_mdp(fh.read())


def save_policies(path, pi_e, pi_b):
    write_atomic(path, dumps_policies(pi_e, pi_b))


def load_policies(path):
    with open(path) as fh:
        return loads_policies(fh.read())
