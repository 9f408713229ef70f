"""
依赖注入管理模块
管理FastAPI依赖注入，提供复原模型与上传图像校验
"""

import io
import logging

import numpy as np
import torch
from fastapi import File, HTTPException, UploadFile
from PIL import Image, UnidentifiedImageError

from exceptions import SymUNetError
from restoration_service import Restorer
from singletons import restorer_manager

logger = logging.getLogger(__name__)

MAX_UPLOAD_BYTES = 32 * 1024 * 1024


def get_restorer_dependency() -> Restorer:
    """
    依赖注入：获取复原模型

    Returns:
        复原模型实例

    Raises:
        HTTPException: 模型未就绪（503）
    """
    try:
        return restorer_manager.get_restorer()
    except SymUNetError as e:
        logger.error(f"复原模型获取失败: {e.message}")
        raise HTTPException(status_code=503, detail=f"复原模型不可用: {e.message}")


async def read_upload_image(file: UploadFile = File(...)) -> torch.Tensor:
    """
    依赖注入：读取并校验上传的 PNG

    Returns:
        [3,H,W] float32 图像，取值 [0,1]

    Raises:
        HTTPException: 文件为空、过大或不是 PNG（400）
    """
    payload = await file.read()
    if not payload:
        raise HTTPException(status_code=400, detail="上传文件为空")
    if len(payload) > MAX_UPLOAD_BYTES:
        raise HTTPException(status_code=400, detail="上传文件过大")
    try:
        with Image.open(io.BytesIO(payload)) as image:
            if image.format != "PNG":
                raise HTTPException(status_code=400, detail=f"仅支持 PNG，实际 {image.format}")
            array = np.asarray(image.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise HTTPException(status_code=400, detail=f"图像解析失败: {e}")
    return torch.from_numpy(array.copy()).permute(2, 0, 1).float() / 255.0
