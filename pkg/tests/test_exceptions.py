import logging

import pytest

from exceptions import (
    CheckpointError, DatasetError, ErrorCode, GraphError, NoCorrespondenceError, exception_handler,
)


def test_no_correspondence_is_a_graph_error():
    err = NoCorrespondenceError(details={"query": "q1"})
    assert isinstance(err, GraphError)
    assert err.message == "no correspondence"
    assert err.error_code is ErrorCode.NO_CORRESPONDENCE
    assert err.to_dict()["details"] == {"query": "q1"}


def test_dataset_error_details():
    err = DatasetError("bad box", doc_id="d1", region_id="r7")
    assert err.to_dict()["details"] == {"doc_id": "d1", "region_id": "r7"}


def test_exception_handler_logs_and_reraises(caplog):
    log = logging.getLogger("oneshot.test")

    @exception_handler(logger=log)
    def load():
        raise CheckpointError("checkpoint checksum mismatch", path="x.ckpt")

    with caplog.at_level(logging.ERROR, logger="oneshot.test"):
        with pytest.raises(CheckpointError):
            load()
    assert "Error in load" in caplog.text
    assert caplog.records[-1].error_details["details"]["path"] == "x.ckpt"


def test_exception_handler_default_return():
    @exception_handler(reraise=False, default_return=-1, handled_exceptions=(ValueError,))
    def parse(text):
        return int(text)

    assert parse("3") == 3
    assert parse("x") == -1
