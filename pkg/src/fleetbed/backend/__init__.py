from .service import HEARTBEAT_FIELDS, Backend, OtaCatalog, Response, query_from_params
from .store import IngestReport, QueryRequest, Store, decode_upload, tag_table

__all__ = [
    "HEARTBEAT_FIELDS",
    "Backend",
    "IngestReport",
    "OtaCatalog",
    "QueryRequest",
    "Response",
    "Store",
    "decode_upload",
    "query_from_params",
    "tag_table",
]
