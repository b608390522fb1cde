from fastapi import APIRouter, File, HTTPException, Query, UploadFile

from app.config import settings
from app.schemas.results import ModelStatus, SegmentationResponse
from app.services.inference import segment
from app.services.model_service import model_service
from app.services.volume_io import decode_volume
from app.utils.logger import get_logger

logger = get_logger("segmentation_api")
router = APIRouter()


@router.get("/model-status", response_model=ModelStatus)
async def get_model_status():
    """Check whether a checkpoint is loaded for segmentation"""
    if not model_service.is_model_loaded():
        return ModelStatus(model_loaded=False)
    return ModelStatus(
        model_loaded=True,
        checkpoint=model_service.checkpoint_path,
        provenance=model_service.get_model().provenance.kind.value,
    )


@router.post("/segment", response_model=SegmentationResponse)
async def segment_volume(
    volume_file: UploadFile = File(...),
    threshold: float = Query(settings.SEGMENT_THRESHOLD, description="Lesion probability threshold",
                             ge=0.0, le=1.01),
):
    """
    Segment one MVL1 volume with the loaded model

    Dice is reported only when the uploaded volume carries a non-empty reference mask.
    """
    if not model_service.is_model_loaded():
        raise HTTPException(
            status_code=503,
            detail="Segmentation model is not loaded. Please try again later."
        )

    data = await volume_file.read()
    volume = decode_volume(data)
    logger.info(f"Segmenting uploaded volume {volume_file.filename} "
                f"({volume.shape[0]}x{volume.shape[1]}, threshold {threshold})")

    result = segment(model_service.get_fcn(), volume, threshold)
    return SegmentationResponse(
        height=volume.shape[0],
        width=volume.shape[1],
        threshold=threshold,
        lesion_voxels=int(result.mask.sum()),
        brain_voxels=int(volume.brain_mask.sum()),
        dice=result.dice if result.has_reference else None,
    )
