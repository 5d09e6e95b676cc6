"""Describe, reason with reflection, integrate visual anchors; emit JSONL records."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

from ..errors import BackendError, EmptyOutput, NoAnchorProduced

log = logging.getLogger(__name__)

DEFAULT_ANCHOR_LEXICON = (
    r"look back at the \w+",
    r"check the (?:image|figure|diagram|picture|graph) again",
    r"refer back to the (?:image|figure|diagram|picture|graph)",
    r"re-?examine the (?:image|figure|diagram|picture|graph)",
    r"looking at the (?:image|figure|diagram|picture|graph) again",
)
INSERT_PHRASES = (
    "Let me check the image again.",
    "Look back at the figure to confirm.",
    "Refer back to the image before continuing.",
)
STAGES = ("describe", "reason", "anchor")


def load_templates(directory: str | Path | None = None) -> dict[str, str]:
    """Stage templates from ``directory`` (describe.txt, reason.txt, anchor.txt) or the packaged defaults."""
    out = {}
    for stage in STAGES:
        if directory is not None:
            out[stage] = (Path(directory) / f"{stage}.txt").read_text(encoding="utf-8")
        else:
            out[stage] = resources.files("avar.synth").joinpath("templates", f"{stage}.txt").read_text(encoding="utf-8")
    return out


@dataclass
class SynthesisRecord:
    id: str
    image_ref: str
    question: str
    description: str
    reasoning: str
    anchored_reasoning: str
    anchor_count: int
    answer: str | None
    provenance: dict = field(default_factory=dict)


@dataclass
class PipelineConfig:
    anchor_mode: str = "rule"  # rule | client
    every_k: int = 3
    max_tokens: int = 1024
    temperature: float = 0.0
    lexicon: tuple[str, ...] = DEFAULT_ANCHOR_LEXICON
    templates: dict | None = None


def count_anchors(text: str, lexicon=DEFAULT_ANCHOR_LEXICON) -> int:
    """Non-overlapping, case-insensitive matches of any lexicon pattern."""
    if not text:
        return 0
    pattern = re.compile("|".join(f"(?:{p})" for p in lexicon), re.I)
    return sum(1 for _ in pattern.finditer(text))


def _complete(client, prompt: str, cfg: PipelineConfig) -> str:
    text = client.complete(prompt, max_tokens=cfg.max_tokens, temperature=cfg.temperature)
    if not text or not text.strip():
        raise EmptyOutput(f"{getattr(client, 'name', 'backend')} returned empty output")
    return text.strip()


def render(template: str, **slots) -> str:
    out = template
    for k, v in slots.items():
        out = out.replace("{" + k + "}", v)
    return out


def describe(image_doc: str, client, cfg: PipelineConfig | None = None) -> str:
    cfg = cfg or PipelineConfig()
    if not image_doc or not image_doc.strip():
        raise ValueError("image_doc must be non-empty")
    templates = cfg.templates or load_templates()
    return _complete(client, render(templates["describe"], image_doc=image_doc), cfg)


def reason(description: str, question: str, client, cfg: PipelineConfig | None = None) -> str:
    cfg = cfg or PipelineConfig()
    if not description.strip() or not question.strip():
        raise ValueError("description and question must be non-empty")
    templates = cfg.templates or load_templates()
    return _complete(client, render(templates["reason"], description=description, question=question), cfg)


def insert_anchors_rule(chain: str, k: int = 3) -> str:
    """Prefix an anchor phrase to every k-th non-empty line (steps k, 2k, ...)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    out, step, inserted = [], 0, 0
    for line in chain.splitlines():
        if line.strip() and not line.lower().startswith("answer:"):
            step += 1
            if step % k == 0:
                line = f"{INSERT_PHRASES[inserted % len(INSERT_PHRASES)]} {line}"
                inserted += 1
        out.append(line)
    return "\n".join(out)


def integrate_anchors(chain: str, client=None, cfg: PipelineConfig | None = None) -> str:
    """Rule mode when ``client`` is None, else delegate to the backend and re-check (one retry)."""
    cfg = cfg or PipelineConfig()
    if not chain or not chain.strip():
        raise ValueError("chain must be non-empty")
    if client is None:
        out = insert_anchors_rule(chain, cfg.every_k)
        if count_anchors(out, cfg.lexicon) == 0:
            # chains shorter than k steps still need one anchor
            first, _, rest = chain.partition("\n")
            out = f"{INSERT_PHRASES[0]} {first}" + (f"\n{rest}" if rest else "")
        return out
    templates = cfg.templates or load_templates()
    prompt = render(templates["anchor"], chain=chain)
    for _ in range(2):
        out = _complete(client, prompt, cfg)
        if count_anchors(out, cfg.lexicon) >= 1:
            return out
    raise NoAnchorProduced("backend output contained no visual anchor after a retry")


def synthesize(item: dict, clients: dict, cfg: PipelineConfig) -> SynthesisRecord:
    doc = item.get("image_doc") or item.get("image_ref") or ""
    question = item.get("question", "")
    desc = describe(doc, clients["describe"], cfg)
    chain = reason(desc, question, clients["reason"], cfg)
    anchor_client = clients.get("anchor") if cfg.anchor_mode == "client" else None
    anchored = integrate_anchors(chain, anchor_client, cfg)
    return SynthesisRecord(
        id=str(item.get("id", "")),
        image_ref=str(item.get("image_ref", doc)),
        question=question,
        description=desc,
        reasoning=chain,
        anchored_reasoning=anchored,
        anchor_count=count_anchors(anchored, cfg.lexicon),
        answer=item.get("answer"),
        provenance={
            "describe": clients["describe"].name,
            "reason": clients["reason"].name,
            "anchor": anchor_client.name if anchor_client is not None else f"rule:k={cfg.every_k}",
        },
    )


def read_inputs(path, n: int | None = None) -> list[dict]:
    items = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                items.append(json.loads(line))
                if n is not None and len(items) >= n:
                    break
    return items


def run_pipeline(inputs: list[dict], clients, out_path, concurrency: int = 4,
                 cfg: PipelineConfig | None = None) -> dict:
    """Synthesize every input with at most ``concurrency`` records in flight.

    Records are written to ``out_path`` in input order; failed inputs are
    listed in the returned summary and skipped in the file.
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    cfg = cfg or PipelineConfig()
    if cfg.templates is None:
        cfg.templates = load_templates()
    if not isinstance(clients, dict):
        clients = {s: clients for s in STAGES}

    def work(item):
        try:
            return synthesize(item, clients, cfg), None
        except (BackendError, ValueError) as exc:
            return None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        results = list(pool.map(work, inputs))

    failures, counts = [], []
    with open(out_path, "w", encoding="utf-8", newline="\n") as f:
        for i, (rec, err) in enumerate(results):
            if rec is None:
                failures.append({"index": i, "id": str(inputs[i].get("id", i)), "error": err})
                log.warning("record %d failed: %s", i, err)
                continue
            counts.append(rec.anchor_count)
            f.write(json.dumps(asdict(rec), ensure_ascii=False) + "\n")
    return {
        "inputs": len(inputs),
        "records": len(counts),
        "failed": len(failures),
        "failures": failures,
        "anchors": {
            "total": sum(counts),
            "mean": sum(counts) / len(counts) if counts else 0.0,
            "min": min(counts, default=0),
            "max": max(counts, default=0),
        },
    }
