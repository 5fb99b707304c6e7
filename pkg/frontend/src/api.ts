/** Thin client over the edit service HTTP + WebSocket API.
 *
 * Transports are injectable so the state machines stay testable without
 * a browser: pass a fetch-compatible function and a WebSocket factory.
 */

import {
  CameraSpec,
  EditOp,
  EditResponse,
  GaussianInfo,
  LoadResponse,
  PROTOCOL_VERSION,
  SelectionSpec,
  ServerEvent,
  Vec3,
} from './protocol.js'

export type FetchLike = (url: string, init?: {
  method?: string
  headers?: Record<string, string>
  body?: string
}) => Promise<{
  status: number
  json(): Promise<unknown>
  arrayBuffer(): Promise<ArrayBuffer>
  headers: { get(name: string): string | null }
}>

export interface SocketLike {
  onmessage: ((ev: { data: string }) => void) | null
  onclose: ((ev: unknown) => void) | null
  onerror: ((ev: unknown) => void) | null
  close(): void
}

export type SocketFactory = (url: string) => SocketLike

export interface RenderResult {
  png: ArrayBuffer
  epoch: number
}

export class ServiceClient {
  constructor(
    private baseUrl: string,
    private fetchFn: FetchLike = fetch as unknown as FetchLike,
    private socketFactory: SocketFactory =
      ((url: string) => new WebSocket(url)) as unknown as SocketFactory,
  ) {}

  private async post(path: string, body: Record<string, unknown>) {
    return this.fetchFn(`${this.baseUrl}${path}`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ version: PROTOCOL_VERSION, ...body }),
    })
  }

  async loadScene(checkpointPath: string): Promise<LoadResponse> {
    const resp = await this.post('/scene/load', { checkpointPath })
    if (resp.status !== 200) throw new Error(`load failed: ${resp.status}`)
    return (await resp.json()) as LoadResponse
  }

  async render(camera: CameraSpec, width: number, height: number,
               quality: 'low' | 'medium' | 'full',
               seed = 0): Promise<RenderResult> {
    const resp = await this.post('/render',
                                 { camera, width, height, quality, seed })
    if (resp.status !== 200) throw new Error(`render failed: ${resp.status}`)
    return {
      png: await resp.arrayBuffer(),
      epoch: Number(resp.headers.get('X-Epoch') ?? -1),
    }
  }

  async edit(op: EditOp, selection: SelectionSpec,
             params: Record<string, unknown>):
    Promise<{ ok: true; newEpoch: number } | { ok: false; status: number }> {
    const resp = await this.post('/edit', { op, selection, params })
    if (resp.status !== 200) return { ok: false, status: resp.status }
    const body = (await resp.json()) as EditResponse
    return { ok: true, newEpoch: body.newEpoch }
  }

  async gaussians(min: Vec3, max: Vec3): Promise<GaussianInfo[]> {
    const bounds = [...min, ...max].join(',')
    const resp = await this.fetchFn(
      `${this.baseUrl}/gaussians?bounds=${encodeURIComponent(bounds)}`)
    if (resp.status !== 200) {
      throw new Error(`gaussians failed: ${resp.status}`)
    }
    const body = (await resp.json()) as { gaussians: GaussianInfo[] }
    return body.gaussians
  }

  /** Subscribe to the event stream; returns a handle that closes it. */
  subscribe(onEvent: (ev: ServerEvent) => void,
            onClose: () => void): { close(): void } {
    const wsUrl = this.baseUrl.replace(/^http/, 'ws') + '/subscribe'
    const socket = this.socketFactory(wsUrl)
    socket.onmessage = (msg) => {
      onEvent(JSON.parse(msg.data) as ServerEvent)
    }
    socket.onclose = () => onClose()
    socket.onerror = () => socket.close()
    return { close: () => socket.close() }
  }
}

/** Exponential backoff schedule for reconnect attempts, capped. */
export function backoffDelays(baseMs = 250, capMs = 8000): () => number {
  let attempt = 0
  return () => {
    const delay = Math.min(capMs, baseMs * 2 ** attempt)
    attempt += 1
    return delay
  }
}
