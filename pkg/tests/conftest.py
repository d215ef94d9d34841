import pytest

TINY = {
    "synth_count": 48,
    "batch_size": 8,
    "epochs": 1,
    "max_steps": 3,
    "student.enc_depth": 4,
    "student.enc_width": 32,
    "student.enc_heads": 4,
    "student.dec_width": 32,
    "student.dec_heads": 4,
}


@pytest.fixture(scope="session")
def surrogate_teacher():
    from strdistill.teacher import ClipTeacher, TeacherConfig

    return ClipTeacher(TeacherConfig())


@pytest.fixture()
def tiny_config(tmp_path_factory):
    from strdistill.config import build_config

    work = tmp_path_factory.getbasetemp() / "tiny-work"
    run = tmp_path_factory.mktemp("run")

    def make(**overrides):
        values = {**TINY, "workdir": str(work), "checkpoint_dir": str(run / "ckpt"), **overrides}
        return build_config(overrides=values)

    return make


def pytest_terminal_summary(terminalreporter):
    acceptance = __import__("sys").modules.get("test_acceptance")
    lines = getattr(acceptance, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
