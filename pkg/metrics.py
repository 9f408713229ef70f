"""
损失与评价指标
L1 + λ·FFT 训练损失，PSNR / SSIM 评测指标
"""

import logging
import math

import torch
import kornia

from exceptions import DimensionError

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11


def _check_shapes(x_hat: torch.Tensor, x: torch.Tensor, where: str) -> None:
    if x_hat.shape != x.shape:
        raise DimensionError(f"{where}: 形状不一致 {tuple(x_hat.shape)} vs {tuple(x.shape)}")


# ========== 损失 ==========
def l1_loss(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """平均绝对误差"""
    _check_shapes(x_hat, x, "l1_loss")
    return (x_hat - x).abs().mean()


def fft_loss(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """逐通道二维 DFT（不归一化）之差的复模长均值"""
    _check_shapes(x_hat, x, "fft_loss")
    diff = torch.fft.fft2(x_hat, dim=(-2, -1)) - torch.fft.fft2(x, dim=(-2, -1))
    return diff.abs().mean()


def total_loss(x_hat: torch.Tensor, x: torch.Tensor, lambda_fft: float = 0.1) -> torch.Tensor:
    """L1 + λ·FFT"""
    loss = l1_loss(x_hat, x)
    if lambda_fft == 0:
        return loss
    return loss + lambda_fft * fft_loss(x_hat, x)


# ========== 评价指标 ==========
def psnr(x_hat: torch.Tensor, x: torch.Tensor, peak: float = 1.0) -> float:
    """
    峰值信噪比（dB），在 float64 下计算 MSE

    Args:
        x_hat: 复原图像
        x: 参考图像
        peak: 峰值（浮点图像为 1.0）

    Returns:
        10·log10(peak²/MSE)；完全相同时返回 100 dB
    """
    _check_shapes(x_hat, x, "psnr")
    mse = torch.mean((x_hat.double() - x.double()) ** 2).item()
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def batch_psnr(x_hat: torch.Tensor, x: torch.Tensor, peak: float = 1.0) -> float:
    """批量内逐张 PSNR 的均值"""
    _check_shapes(x_hat, x, "batch_psnr")
    if x_hat.dim() == 3:
        return psnr(x_hat, x, peak)
    return sum(psnr(a, b, peak) for a, b in zip(x_hat, x)) / x_hat.shape[0]


def ssim(x_hat: torch.Tensor, x: torch.Tensor, peak: float = 1.0) -> float:
    """
    单尺度 SSIM：11×11 高斯窗（σ=1.5），K1=0.01，K2=0.03，只统计完整窗口，逐通道取均值

    Returns:
        [-1, 1] 内的标量
    """
    _check_shapes(x_hat, x, "ssim")
    a = x_hat.double()
    b = x.double()
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise DimensionError(f"SSIM 需要至少 {SSIM_WINDOW}×{SSIM_WINDOW} 的图像，实际 {tuple(a.shape[-2:])}")
    ssim_map = kornia.metrics.ssim(a, b, SSIM_WINDOW, max_val=peak, eps=1e-12, padding="valid")
    return ssim_map.mean().item()
