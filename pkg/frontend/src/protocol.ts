/** Wire types of the edit service. Every control payload carries `version`. */

export const PROTOCOL_VERSION = 1

export type Vec3 = [number, number, number]

export interface CameraSpec {
  pose: number[][]
  focal: number
  near: number
  far: number
}

export interface GaussianInfo {
  index: number
  mean: Vec3
  radius: number
  confidence: number
}

export type SelectionSpec =
  | 'all'
  | { all: true }
  | { indices: number[] }
  | { sphere: { center: Vec3; radius: number } }
  | { aabb: { min: Vec3; max: Vec3 } }

export type EditOp = 'translate' | 'rotate' | 'scale' | 'bind_mesh' | 'deform_frame'

export interface EpochChangedPayload {
  epoch: number
  dirtyBounds: { min: Vec3; max: Vec3 } | null
}

export interface PreviewFramePayload {
  epoch: number
  quality: number
  width: number
  height: number
  png_base64: string
}

export type ServerEvent =
  | { version: number; event: 'hello'; payload: { epoch: number | null } }
  | { version: number; event: 'epochChanged'; payload: EpochChangedPayload }
  | { version: number; event: 'previewFrame'; payload: PreviewFramePayload }

export interface LoadResponse {
  version: number
  epoch: number
  gaussianCount: number
  bounds: { min: Vec3; max: Vec3 } | null
}

export interface EditResponse {
  version: number
  newEpoch: number
}
