"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

_RESULTS: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, title, informational=False): acceptance criterion covered")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", m.args[0]))
            item.user_properties.append(("title", m.args[1]))
            if m.kwargs.get("informational"):
                item.user_properties.append(("informational", True))


def pytest_runtest_logreport(report):
    props: dict = {}
    for k, v in report.user_properties:
        if k == "detail" and props.get("detail"):
            v = f"{props['detail']}; {v}"
        props[k] = v
    cid = props.get("criterion")
    if cid is None:
        return
    entry = _RESULTS.setdefault(cid, {"title": props.get("title", ""), "detail": "", "outcome": None})
    if props.get("detail"):
        entry["detail"] = props["detail"]
    if report.when == "call" or report.failed:
        if report.failed:
            entry["outcome"] = "FAIL"
        elif entry["outcome"] is None:
            entry["outcome"] = "INFO" if props.get("informational") else "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in sorted(_RESULTS, key=lambda c: (int("".join(ch for ch in c if ch.isdigit())), c)):
        r = _RESULTS[cid]
        line = f"[{r['outcome'] or 'SKIP'}] criterion {cid}: {r['title']}"
        if r["detail"]:
            line += f" -- {r['detail']}"
        tr.write_line(line)
