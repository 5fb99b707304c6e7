/** Orbit camera and the projection math shared with the render service.
 *
 * The service convention: `pose` maps camera to world, the camera looks
 * down its local -z with +y up, `focal` is in pixels, and pixel (i, j)
 * spans its center at (i + 0.5, j + 0.5). Selection depends on this
 * projection agreeing with the server's ray generation exactly.
 */

import type { CameraSpec, Vec3 } from './protocol.js'

export interface OrbitState {
  target: Vec3
  distance: number
  azimuth: number   // radians around +y
  elevation: number // radians above the horizon
}

const EPS = 1e-9

function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ]
}

function norm(a: Vec3): number {
  return Math.hypot(a[0], a[1], a[2])
}

function normalize(a: Vec3): Vec3 {
  const n = norm(a)
  return n < EPS ? [0, 0, 1] : [a[0] / n, a[1] / n, a[2] / n]
}

export function orbitEye(state: OrbitState): Vec3 {
  const ce = Math.cos(state.elevation)
  return [
    state.target[0] + state.distance * ce * Math.sin(state.azimuth),
    state.target[1] + state.distance * Math.sin(state.elevation),
    state.target[2] + state.distance * ce * Math.cos(state.azimuth),
  ]
}

/** Camera-to-world pose looking from the orbit eye at the target. */
export function orbitPose(state: OrbitState): number[][] {
  const eye = orbitEye(state)
  const forward = normalize([
    state.target[0] - eye[0],
    state.target[1] - eye[1],
    state.target[2] - eye[2],
  ])
  const worldUp: Vec3 = Math.abs(forward[1]) > 0.999 ? [0, 0, 1] : [0, 1, 0]
  const right = normalize(cross(forward, worldUp))
  const up = cross(right, forward)
  return [
    [right[0], up[0], -forward[0], eye[0]],
    [right[1], up[1], -forward[1], eye[1]],
    [right[2], up[2], -forward[2], eye[2]],
    [0, 0, 0, 1],
  ]
}

export function cameraSpec(state: OrbitState, focal: number,
                           near = 0.1, far = 100): CameraSpec {
  return { pose: orbitPose(state), focal, near, far }
}

/** World point -> continuous pixel coordinates, or null when behind. */
export function projectToScreen(
  pose: number[][], focal: number, width: number, height: number,
  point: Vec3,
): { x: number; y: number } | null {
  // p_cam = R^T (p - t); pose columns are the camera axes in world space.
  const dx = point[0] - pose[0][3]
  const dy = point[1] - pose[1][3]
  const dz = point[2] - pose[2][3]
  const cx = pose[0][0] * dx + pose[1][0] * dy + pose[2][0] * dz
  const cy = pose[0][1] * dx + pose[1][1] * dy + pose[2][1] * dz
  const cz = pose[0][2] * dx + pose[1][2] * dy + pose[2][2] * dz
  if (cz >= -EPS) return null // camera looks down -z
  const xn = cx / -cz
  const yn = cy / -cz
  return { x: width / 2 + xn * focal, y: height / 2 - yn * focal }
}

export function pan(state: OrbitState, dxPixels: number, dyPixels: number,
                    focal: number): OrbitState {
  const pose = orbitPose(state)
  const scale = state.distance / focal
  return {
    ...state,
    target: [
      state.target[0] - (pose[0][0] * dxPixels - pose[0][1] * dyPixels) * scale,
      state.target[1] - (pose[1][0] * dxPixels - pose[1][1] * dyPixels) * scale,
      state.target[2] - (pose[2][0] * dxPixels - pose[2][1] * dyPixels) * scale,
    ],
  }
}

export function orbit(state: OrbitState, dAzimuth: number,
                      dElevation: number): OrbitState {
  const lim = Math.PI / 2 - 0.01
  return {
    ...state,
    azimuth: state.azimuth + dAzimuth,
    elevation: Math.min(lim, Math.max(-lim, state.elevation + dElevation)),
  }
}

export function zoom(state: OrbitState, factor: number): OrbitState {
  return { ...state, distance: Math.max(1e-3, state.distance * factor) }
}
