"""
图像复原HTTP服务
上传退化 PNG，返回复原后的 PNG；模型由单例管理器持有
"""

import io
import logging
import traceback
from contextlib import asynccontextmanager
from datetime import datetime, timezone

import torch
import uvicorn
from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from PIL import Image

from config import get_config_summary, get_settings, settings
from dataset_service import to_uint8
from dependencies import get_restorer_dependency, read_upload_image
from exceptions import ErrorHandler, SymUNetError, create_error_response
from restoration_service import Restorer
from schemas import HealthResponse, ModelInfoResponse
from singletons import restorer_manager

logger = logging.getLogger("symunet_api")

# SymUNetError 到 HTTP 状态码
STATUS_CODES = {
    "CONFIG_ERROR": 400,
    "DIMENSION_ERROR": 400,
    "PARAMETER_ERROR": 400,
    "FORMAT_ERROR": 400,
    "CHECKPOINT_ERROR": 503,
}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@asynccontextmanager
async def lifespan(app: FastAPI):
    """管理应用程序生命周期 - 启动时加载检查点"""
    checkpoint = get_settings().checkpoint
    if checkpoint and not restorer_manager.is_loaded:
        try:
            restorer_manager.load(checkpoint)
        except SymUNetError as e:
            # 未就绪时 /restore 返回 503，/health 仍可用
            logger.error(f"启动时加载模型失败: {e.message}")
    yield
    logger.info("应用程序关闭")


app = FastAPI(
    title=settings.title,
    description="SymUNet / SE-SymUNet 全能图像复原服务：上传退化 PNG，返回复原结果",
    version=settings.version,
    lifespan=lifespan,
)


@app.exception_handler(RequestValidationError)
async def validation_exception_handler(request: Request, exc: RequestValidationError):
    """处理请求验证错误（422错误）"""
    errors = [
        {"field": " -> ".join(str(loc) for loc in error["loc"]), "message": error["msg"], "type": error["type"]}
        for error in exc.errors()
    ]
    logger.error(f"请求验证失败 - URL: {request.url}, 详情: {errors}")
    return JSONResponse(
        status_code=422,
        content={"error": "请求数据验证失败", "error_code": "VALIDATION_ERROR",
                 "details": {"errors": errors}, "processed_at": _now()},
    )


@app.exception_handler(SymUNetError)
async def symunet_exception_handler(request: Request, exc: SymUNetError):
    """领域异常转为 JSON 错误体"""
    status = STATUS_CODES.get(exc.error_code, 500)
    return JSONResponse(status_code=status, content=create_error_response(exc))


@app.exception_handler(HTTPException)
async def http_exception_handler(request: Request, exc: HTTPException):
    """HTTP异常处理器"""
    logger.error(f"HTTP异常: {exc.status_code} - {exc.detail}")
    return JSONResponse(
        status_code=exc.status_code,
        content={"error": exc.detail, "error_code": str(exc.status_code), "details": {}, "processed_at": _now()},
    )


@app.exception_handler(Exception)
async def global_exception_handler(request: Request, exc: Exception):
    """全局异常处理器"""
    logger.error(f"全局异常: {exc}\n{traceback.format_exc()}")
    return JSONResponse(status_code=500, content=ErrorHandler.create_error_response(exc, "服务器内部错误"))


@app.middleware("http")
async def log_requests(request: Request, call_next):
    """记录请求日志"""
    start_time = datetime.now(timezone.utc)
    logger.info(f"请求开始: {request.method} {request.url}")
    try:
        response = await call_next(request)
        process_time = (datetime.now(timezone.utc) - start_time).total_seconds()
        logger.info(f"请求完成: {request.method} {request.url} - {response.status_code} - {process_time:.2f}s")
        return response
    except Exception as e:
        process_time = (datetime.now(timezone.utc) - start_time).total_seconds()
        logger.error(f"请求失败: {request.method} {request.url} - {e} - {process_time:.2f}s")
        raise


@app.get("/health", response_model=HealthResponse)
async def health():
    """健康检查"""
    info = restorer_manager.get_model_info()
    return HealthResponse(
        status="ok" if info["loaded"] else "degraded",
        model_loaded=info["loaded"],
        checkpoint=info.get("checkpoint"),
        processed_at=_now(),
    )


@app.get("/config")
async def config_summary():
    """运行配置摘要"""
    return get_config_summary()


@app.get("/model", response_model=ModelInfoResponse)
async def model_info(restorer: Restorer = Depends(get_restorer_dependency)):
    """模型结构与参数量"""
    return ModelInfoResponse(**restorer.info())


@app.post("/restore")
def restore(
    image: torch.Tensor = Depends(read_upload_image),
    restorer: Restorer = Depends(get_restorer_dependency),
):
    """复原上传的 PNG，返回 PNG"""
    restored = restorer.restore(image)
    buffer = io.BytesIO()
    Image.fromarray(to_uint8(restored)).save(buffer, format="PNG")
    logger.info(f"复原完成: {tuple(image.shape[-2:])}")
    return Response(content=buffer.getvalue(), media_type="image/png")


def run_server(host: str = None, port: int = None) -> None:
    """启动 uvicorn"""
    current = get_settings()
    uvicorn.run(app, host=host or current.host, port=port or current.port)
