import json

import pytest
import torch


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(name): end-to-end criterion reported in the summary"
    )
    config._acceptance_results = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        item.config._acceptance_results.append((marker.args[0], report.passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance_results", [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed in results:
        terminalreporter.write_line(f"[ACCEPTANCE] {name}: {'PASS' if passed else 'FAIL'}")


@pytest.fixture(scope="session")
def tiny_encoder(tmp_path_factory):
    """A local random-weight 768-d encoder so tests never touch the network.

    Character-level wordpiece vocab: every word splits into one subword per
    character, which exercises the subword-to-word pooling hard.
    """
    from tokenizers import Tokenizer
    from tokenizers.models import WordPiece
    from tokenizers.normalizers import BertNormalizer
    from tokenizers.pre_tokenizers import BertPreTokenizer
    from tokenizers.processors import TemplateProcessing
    from transformers import BertConfig, BertModel, BertTokenizerFast

    d = tmp_path_factory.mktemp("tiny-encoder")
    chars = "abcdefghijklmnopqrstuvwxyz0123456789"
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    vocab += list(chars) + ["##" + c for c in chars]
    vd = {t: i for i, t in enumerate(vocab)}
    backend = Tokenizer(WordPiece(vd, unk_token="[UNK]", continuing_subword_prefix="##"))
    backend.normalizer = BertNormalizer(lowercase=True)
    backend.pre_tokenizer = BertPreTokenizer()
    backend.post_processor = TemplateProcessing(
        single="[CLS] $A [SEP]",
        pair="[CLS] $A [SEP] $B [SEP]",
        special_tokens=[("[CLS]", vd["[CLS]"]), ("[SEP]", vd["[SEP]"])],
    )
    tokenizer = BertTokenizerFast(
        tokenizer_object=backend,
        unk_token="[UNK]",
        pad_token="[PAD]",
        cls_token="[CLS]",
        sep_token="[SEP]",
        mask_token="[MASK]",
    )
    config = BertConfig(
        vocab_size=len(vocab),
        hidden_size=768,
        num_hidden_layers=2,
        num_attention_heads=12,
        intermediate_size=512,
        max_position_embeddings=1024,
    )
    torch.manual_seed(1234)
    model = BertModel(config)
    model.eval()
    model.save_pretrained(d)
    tokenizer.save_pretrained(d)
    return str(d)


def write_sentences(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for sid, text in rows:
            fh.write(json.dumps({"sentence_id": sid, "text": text}) + "\n")
